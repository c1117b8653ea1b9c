import numpy as np
import pytest

from hscmoe.model import ModelConfig, MoENet


def tiny_config(**kw):
    base = dict(n_experts=4, top_k=2, n_disagree=1, embed_dim=4, expert_widths=(8, 4, 1),
                vocab_sizes=(6, 3, 5), n_numeric=3, lambda_hsc=0.5, lambda_adv=0.5, seed=1)
    base.update(kw)
    return ModelConfig(**base)


def tiny_batch(rng, n_sessions=2, per_session=2, cfg=None):
    cfg = cfg or tiny_config()
    sess = np.repeat(np.arange(n_sessions), per_session)
    sc = rng.integers(1, cfg.vocab_sizes[0], size=n_sessions)
    tc = 1 + (sc - 1) % (cfg.vocab_sizes[1] - 1)
    extra = [rng.integers(0, v, size=len(sess)) for v in cfg.vocab_sizes[2:]]
    sparse = np.column_stack([sc[sess], tc[sess], *extra]).astype(np.int64)
    numeric = rng.random((len(sess), cfg.n_numeric))
    y = np.tile([1.0, 0.0], len(sess) // 2 + 1)[: len(sess)]
    return sparse, numeric, y, sess


@pytest.fixture
def tiny():
    cfg = tiny_config()
    return cfg, MoENet(cfg)


# acceptance results, printed once at the end of the run
ACCEPTANCE = []


def record(number, name, ok, detail=""):
    ACCEPTANCE.append((number, name, ok, detail))
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {name}: {detail}")
