from localbench.main import run_cli

run_cli()
