"""Byte-level corpus and a deterministic batch stream.

The file is split into ``(len - 1) // T`` non-overlapping windows of
``T + 1`` bytes (inputs plus next-byte targets). Each epoch visits the windows
in a permutation drawn from ``(seed, epoch)`` and drops the final partial
batch, so batch ``k`` is a pure function of ``(file, T, N, seed, k)`` and
resuming only needs the batch index.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

BYTE_VOCAB = 256
RESERVED_ID = 256  # reserved special id; never produced by the byte tokenizer


def encode_bytes(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def decode_bytes(ids) -> bytes:
    ids = np.asarray(ids)
    return bytes(int(i) for i in ids if 0 <= i < BYTE_VOCAB)


class ByteCorpus:
    def __init__(self, path, context: int, batch_size: int, seed: int = 0):
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as e:
            raise OSError(f"cannot read corpus {path}: {e}") from e
        self.path = path
        self.context = context
        self.batch_size = batch_size
        self.seed = seed
        self.tokens = np.frombuffer(raw, dtype=np.uint8)
        self.n_windows = (len(raw) - 1) // context if len(raw) > 0 else 0
        if self.n_windows < batch_size:
            need = batch_size * context + 1
            raise ValueError(f"corpus {path} has {len(raw)} bytes; need at least {need} for one batch")
        self.batches_per_epoch = self.n_windows // batch_size
        self._perm_cache: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        perm = self._perm_cache.get(epoch)
        if perm is None:
            perm = np.random.default_rng([self.seed, epoch]).permutation(self.n_windows)
            self._perm_cache = {epoch: perm}
        return perm

    def batch(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Batch ``k`` of the stream as (inputs, targets), each ``(N, T)`` int64."""
        epoch, j = divmod(k, self.batches_per_epoch)
        idx = self._perm(epoch)[j * self.batch_size:(j + 1) * self.batch_size]
        T = self.context
        starts = idx * T
        win = self.tokens[starts[:, None] + np.arange(T + 1)].astype(np.int64)
        return win[:, :-1], win[:, 1:]

    def __iter__(self):
        k = 0
        while True:
            yield self.batch(k)
            k += 1


def load_corpus(path, context: int, batch_size: int, seed: int = 0):
    """Iterator over ``(inputs, targets)`` batches of a byte-level corpus."""
    return iter(ByteCorpus(path, context, batch_size, seed))


def docstring_corpus(min_bytes: int = 1_200_000, root=None) -> bytes:
    """English prose gathered from the docstrings of the installed Python stdlib.

    Files are visited in sorted order, so the result is fixed for a given
    Python installation. Used when no external text corpus is available.
    """
    import ast
    import sysconfig

    root = Path(root or sysconfig.get_paths()["stdlib"])
    parts, total = [], 0
    for path in sorted(root.rglob("*.py")):
        if "site-packages" in path.parts or "test" in path.parts or "tests" in path.parts:
            continue
        try:
            tree = ast.parse(path.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError, OSError, ValueError):
            continue
        for node in ast.walk(tree):
            if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                doc = ast.get_docstring(node)
                if doc and len(doc) > 80:
                    chunk = doc.encode("utf-8") + b"\n\n"
                    parts.append(chunk)
                    total += len(chunk)
        if total >= min_bytes:
            break
    if total < min_bytes:
        raise RuntimeError(f"only found {total} bytes of docstrings under {root}")
    return b"".join(parts)
