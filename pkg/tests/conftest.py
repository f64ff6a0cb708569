from __future__ import annotations

import os

# Determinism contract: fixed seeds and one thread everywhere.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import torch  # noqa: E402

from helpers import ACCEPTANCE_LINES  # noqa: E402

torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES.items()):
        terminalreporter.write_line(line)
