"""Plain JSON and JSON-lines files written into run directories."""

import json
from pathlib import Path
from typing import Any, Iterable

from pydantic import BaseModel


def write_json(path, data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, BaseModel):
        text = data.model_dump_json(indent=2)
    else:
        text = json.dumps(data, indent=2, sort_keys=True, default=str)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def read_json(path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


class JsonLinesWriter:
    """Appends one pydantic record per line and flushes after each write."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = self.path.open("w", encoding="utf-8")
        self.count = 0

    def write(self, record: BaseModel):
        self._handle.write(record.model_dump_json() + "\n")
        self._handle.flush()
        self.count += 1

    def write_all(self, records: Iterable[BaseModel]):
        for record in records:
            self.write(record)

    def close(self):
        self._handle.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
