"""Smoke test for the smanet extension module.

Install first with `pip install ./crates/python`, then run
`python python/smoke.py`.
"""

import math
import tempfile
from pathlib import Path

import smanet


def tiny_config():
    cfg = smanet.RunConfig()
    for key, value in [
        ("data.num_eyes", "4"),
        ("data.sequences_per_eye", "3"),
        ("data.seq_len", "3"),
        ("data.image_size", "16"),
        ("train.batch_size", "2"),
        ("train.epochs", "1"),
    ]:
        cfg.set(key, value)
    cfg.validate()
    return cfg


def main():
    cfg = tiny_config()
    assert cfg.get("data.seq_len") == "3"
    assert smanet.RunConfig(cfg.render()).render() == cfg.render()

    assert abs(smanet.roc_auc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) - 0.75) < 1e-12
    assert smanet.cohen_kappa([0, 1, 2], [0, 1, 2], 3) == 1.0

    with tempfile.TemporaryDirectory() as tmp:
        data, run = Path(tmp) / "data", Path(tmp) / "run"
        counts = smanet.generate_dataset(str(data), cfg, seed=1)
        assert sum(counts.values()) == 12, counts

        summary = smanet.train(str(data), str(run), cfg)
        assert summary.epochs_completed == 1
        assert all(math.isfinite(x) for x in summary.train_losses)

        model = smanet.Model.load(str(run / "last.smck"))
        n = model.seq_len * model.input_size ** 2
        pred = model.predict([0.5] * n)
        assert len(pred.slice) == model.seq_len
        assert abs(sum(pred.final) - 1.0) < 1e-5
        print("predicted", pred.class_name)

        report = model.evaluate(str(data), "all")
        assert 0.0 <= report["b_acc"] <= 1.0
        print("b_acc", round(report["b_acc"], 6))

        try:
            model.predict([0.0] * (n - 1))
        except ValueError:
            pass
        else:
            raise AssertionError("short input accepted")

    rows = smanet.gradcheck()
    assert all(passed for _, _, passed in rows)
    print(f"gradcheck {len(rows)} rows ok")
    print("smoke ok")


if __name__ == "__main__":
    main()
