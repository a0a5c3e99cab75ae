import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

SEEDS = (0, 1, 2, 3, 4)
METHODS = ("full", "no-GGM", "no-INA", "no-SOT", "seq-ft")


@pytest.fixture(scope="session")
def small_cfg():
    from lifelora.lifecycle import RunConfig

    return RunConfig(n_train_skills=4, n_holdout=1, train_episodes=64, epochs=4, eval_episodes=5)


@pytest.fixture(scope="session")
def small_run(small_cfg):
    """A quick 4-skill run shared by several modules' tests."""
    from lifelora.lifecycle import train_stream

    kb, report = train_stream(small_cfg)
    return small_cfg, kb, report


@pytest.fixture(scope="session")
def grid():
    """Train every (method, seed) on the default stream; checks base invariance after each stage."""
    from lifelora import adapters as ad
    from lifelora import lifecycle as lc
    from lifelora import toymodel as tm
    from lifelora.embed import HashedEmbedder

    base = lc.RunConfig()
    model = tm.BaseModel(base.model_config())
    emb = HashedEmbedder(base.embed_config())
    snap = model.snapshot()
    zero = ad.init_first_skill(model.cfg.layer_shapes(), base.rank, 0)
    probe = model.cfg.vocab.prompt("probe", [3, 1, 4, 1, 5])
    ref_logits = tm.forward(model, None, probe)
    checks = {"stages": 0, "ok": True}

    def on_stage(t, kb, row):
        checks["stages"] += 1
        checks["ok"] &= model.snapshot() == snap
        checks["ok"] &= bool(np.array_equal(tm.forward(model, zero, probe), ref_logits))

    runs = {}
    for m in METHODS:
        for s in SEEDS:
            cfg = replace(base, method=m, stream_seed=s)
            stream = cfg.stream()
            t0 = time.perf_counter()
            kb, rep = lc.train_stream(cfg, stream, model, emb, on_stage)
            runs[m, s] = {"kb": kb, "report": rep, "stream": stream, "seconds": time.perf_counter() - t0}
    return {"runs": runs, "model": model, "embedder": emb, "invariance": checks}


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
