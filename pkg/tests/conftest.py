import hashlib
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import rpcm
from rpcm.checkpoint import load_params, save_params
from rpcm.experiment import build_suite
from rpcm.train import TrainConfig, train, write_loss_csv

settings.register_profile(
    "repo",
    max_examples=60,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

# Budget for each ablation model; the P2C model of the training check uses the full default schedule.
ABLATION_STEPS = int(os.environ.get("RPCM_ABLATION_STEPS", "1000"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(rpcm.__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def suite():
    """The default 200/40 benchmark split."""
    return build_suite()


@pytest.fixture(scope="session")
def model_store(request, suite):
    """Train-or-load models keyed by (scheme, seed, steps).

    Checkpoints are cached under the pytest cache and keyed by a digest of the
    package sources, so any code change retrains from scratch.
    """
    root = Path(request.config.cache.mkdir("rpcm-models")) / _source_digest()
    memo = {}

    def get(scheme: str, seed: int = 0, steps: int | None = None):
        steps = steps or TrainConfig().steps
        key = (scheme, seed, steps)
        if key not in memo:
            d = root / f"{scheme.replace('&', '_and_')}_{seed}_{steps}"
            ck, loss_csv = d / "model.ckpt", d / "loss.csv"
            if ck.is_file() and loss_csv.is_file():
                lines = loss_csv.read_text().splitlines()[1:]
                losses = [float(line.split(",")[1]) for line in lines]
                memo[key] = (load_params(ck), losses)
            else:
                result = train(suite[0], TrainConfig(scheme=scheme, seed=seed, steps=steps))
                d.mkdir(parents=True, exist_ok=True)
                save_params(ck, result.params)
                write_loss_csv(loss_csv, result.losses)
                memo[key] = (load_params(ck), result.losses)
        return memo[key]

    return get


@pytest.fixture(scope="session")
def ablation_steps():
    return ABLATION_STEPS


@pytest.fixture(scope="session")
def p2c_model(model_store):
    return model_store("P2C")[0]


_AC_LINES: dict[str, str] = {}


@pytest.fixture
def ac_report():
    """Record one status line per acceptance criterion; printed in the terminal summary."""

    def record(name: str, ok: bool, detail: str, seconds: float | None = None) -> bool:
        took = f" [{seconds:.1f}s]" if seconds is not None else ""
        _AC_LINES[name] = f"{name} {'PASS' if ok else 'FAIL'}: {detail}{took}"
        print(_AC_LINES[name])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _AC_LINES:
        terminalreporter.section("acceptance criteria")
        for name in sorted(_AC_LINES, key=lambda n: int(n.split("-")[1])):
            terminalreporter.write_line(_AC_LINES[name])
