import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def write_csv(path, header, rows):
    path.write_text(",".join(header) + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))
    return path
