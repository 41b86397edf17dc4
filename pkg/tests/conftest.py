import os

import numpy as np
import pytest

from olaraw import kernels, store
from olaraw.harness import generate_blocked
from olaraw.store import Schema


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    kernels.warmup()


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """The desk-scale synthetic: 64 chunks x 4096 tuples x 16 zipf columns."""
    d = tmp_path_factory.mktemp("synth")
    path = str(d / "synthetic.csv")
    schema = store.generate_synthetic(path, tuples=64 * 4096, columns=16, seed=42)
    index = store.build_chunk_index(path, schema, target_chunk_bytes=max(os.path.getsize(path) // 64, 1))
    assert index.n_chunks == 64
    return index, schema


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """16 chunks x 512 tuples x 4 columns; quick pipeline runs."""
    d = tmp_path_factory.mktemp("small")
    path = str(d / "small.csv")
    schema = store.generate_synthetic(path, tuples=16 * 512, columns=4, seed=7)
    index = store.build_chunk_index(path, schema, target_chunk_bytes=max(os.path.getsize(path) // 16, 1))
    return index, schema


@pytest.fixture(scope="session")
def blocked_dataset(tmp_path_factory):
    """Within-homogeneous, between-heterogeneous: chunk j holds ~(j+1)*1000."""
    d = tmp_path_factory.mktemp("blocked")
    path = str(d / "blocked.csv")
    schema, index = generate_blocked(path, n_chunks=64, per_chunk=4096, base=1000, noise=50, seed=3)
    return index, schema


@pytest.fixture()
def tiny_csv(tmp_path):
    """Four-chunk file with known content: one int column 1..4096."""
    path = str(tmp_path / "tiny.csv")
    with open(path, "w") as f:
        f.write("\n".join(str(i) for i in range(1, 4097)))
        f.write("\n")
    schema = Schema(("a1",), ("int64",))
    schema.save(path + ".schema")
    index = store.build_chunk_index(path, schema, target_chunk_bytes=os.path.getsize(path) // 4)
    return index, schema
