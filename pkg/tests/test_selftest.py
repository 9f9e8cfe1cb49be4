from dmvae import selftest
from dmvae.selftest import run_all


def test_every_check_passes():
    results = run_all()
    assert [name for name, _, _ in results] == [
        "gradients", "gaussian_poe", "concrete_density", "concrete_poe", "aggregate_posterior"]
    assert all(ok for _, ok, _ in results), results


def test_crashing_check_is_reported_not_raised(monkeypatch):
    def boom():
        raise RuntimeError("broken")
    monkeypatch.setattr(selftest, "_concrete_poe", boom)
    failed = [(name, detail) for name, ok, detail in run_all() if not ok]
    assert failed == [("concrete_poe", "RuntimeError: broken")]
