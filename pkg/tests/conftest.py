import json
import sqlite3
from pathlib import Path
from typing import Any, Dict, List

import pytest

from localbench.backend import ChatClient, RequestParams
from localbench.mockserver import MockProfile, serve


def write_jsonl(path: Path, rows: List[Dict[str, Any]]) -> Path:
    path.write_text("".join(json.dumps(row) + "\n" for row in rows), encoding="utf-8")
    return path


@pytest.fixture
async def mock_backend(unused_tcp_port_factory):
    """Factory starting in-process mock backends; all are stopped afterwards"""
    servers = []

    async def start(**profile_fields):
        server = await serve(MockProfile(**profile_fields), unused_tcp_port_factory())
        servers.append(server)
        await server.wait_listening()
        return server

    yield start
    for server in servers:
        await server.stop()


@pytest.fixture
async def client_for():
    """Factory opening a ChatClient against a mock server"""
    clients = []

    async def open_client(server, max_tokens: int = 512, timeout_s: float = 60.0):
        client = ChatClient(f"http://127.0.0.1:{server.port}", RequestParams("mock-model", max_tokens),
                            request_timeout_s=timeout_s, api_key="")
        await client.__aenter__()
        clients.append(client)
        return client

    yield open_client
    for client in clients:
        await client.close()


@pytest.fixture
def mmlu_dataset(tmp_path: Path) -> Path:
    rows = [
        {"id": f"q{i}", "question": f"What is {i} + {i}?",
         "choices": [str(2 * i), str(2 * i + 1), str(i), "none"], "answer": "A"}
        for i in range(12)
    ]
    return write_jsonl(tmp_path / "mmlu.jsonl", rows)


@pytest.fixture
def qa_dataset(tmp_path: Path) -> Path:
    rows = [
        {"id": "paris", "question": "Where is the Eiffel Tower?",
         "context": "The Eiffel Tower is in Paris.", "answers": ["Paris", "in Paris"]},
        {"id": "none", "question": "Who painted it?", "context": "The Eiffel Tower is in Paris.", "answers": []},
    ]
    return write_jsonl(tmp_path / "qa.jsonl", rows)


@pytest.fixture
def sales_db(tmp_path: Path) -> Path:
    path = tmp_path / "sales.sqlite"
    with sqlite3.connect(path) as db:
        db.execute("CREATE TABLE sales (id INTEGER PRIMARY KEY, region TEXT, amount INTEGER)")
        db.executemany(
            "INSERT INTO sales (region, amount) VALUES (?, ?)",
            [("north", 10), ("south", 20), ("north", 30), ("east", 5)],
        )
    return path


@pytest.fixture
def sql_dataset(tmp_path: Path, sales_db: Path) -> Path:
    rows = [
        {"id": "by-region", "question": "Total amount per region?", "db_path": sales_db.name,
         "gold_sql": "SELECT region, SUM(amount) FROM sales GROUP BY region"},
        {"id": "top", "question": "Amounts from largest to smallest?", "db_path": sales_db.name,
         "gold_sql": "SELECT amount FROM sales ORDER BY amount DESC",
         "schema": "CREATE TABLE sales (id INTEGER, region TEXT, amount INTEGER)"},
    ]
    return write_jsonl(tmp_path / "sql.jsonl", rows)
