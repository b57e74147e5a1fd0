import csv
import json
import os
import struct

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from gradcheck_util import sampled_gradient_errors
from ifr.checkpoint import MAGIC, UnsupportedFormatError
from ifr.data_synth import build_dataset
from ifr.engine import (
    EVAL_COLUMNS, IFR, EngineConfig, InvalidStateError, IterationTrace, PairedDataset, StepRecord,
    TrainConfig, evaluate, iterate, load_checkpoint, save_checkpoint, total_loss, train,
    train_log_columns, write_eval_csv,
)
from ifr.recognizer import Recognition

CHARSET = "abcdefgh"


class IdentityRestorer(nn.Module):
    def forward(self, img, feats):
        return img


def tiny_cfg(**kw):
    base = dict(c_str=16, c_ir=8, max_t=6, charset=CHARSET, train_steps=2, test_steps=2)
    base.update(kw)
    return EngineConfig(**base)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return build_dataset(12, CHARSET, 4, 5, root / "data", max_t=6)


@pytest.fixture
def model():
    torch.manual_seed(0)
    return IFR(tiny_cfg()).eval()


def test_config_defaults():
    cfg = EngineConfig()
    assert cfg.lam == 10.0
    assert (cfg.train_steps, cfg.test_steps) == (3, 3)
    assert cfg.fusion == (1, 3, 5)
    assert cfg.pixel_norm == "l1" and not cfg.detach_between_steps


@pytest.mark.parametrize("kw", [dict(train_steps=0), dict(test_steps=0), dict(lam=-1.0),
                                dict(pixel_norm="l0"), dict(rrf="maybe"), dict(fusion=(1, 2))])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        EngineConfig(**kw)


def test_config_dict_round_trip():
    cfg = tiny_cfg(fusion=(2, 3, 4), rrf="detach")
    assert EngineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError, match="unknown"):
        EngineConfig.from_dict({"c_str": 8, "colour": 1})


def test_lr_schedule_default():
    sched = TrainConfig()
    assert sched.lr == 1.0
    assert [sched.lr_at(e) for e in range(1, 7)] == pytest.approx([1, 1, 1, 1, 0.1, 0.01])


def test_iterate_one_step(model):
    dq = torch.rand(2, 1, 32, 128)
    trace = iterate(model, dq, 1)
    assert len(trace.steps) == 1
    assert trace.input_dq is dq
    ref = model.restorer(dq, model.recognizer.feature_encode(dq))
    assert torch.equal(trace.steps[0].restored, ref)


def test_iterate_three_steps_range(model):
    trace = iterate(model, torch.rand(2, 1, 32, 128), 3)
    assert len(trace.restored) == 3
    for r in trace.restored:
        assert r.shape == (2, 1, 32, 128)
        assert torch.all(r > 0) and torch.all(r < 1)
    assert all(len(s.recognitions) == 2 for s in trace.steps)


def test_iterate_rejects_zero_steps(model):
    with pytest.raises(ValueError):
        iterate(model, torch.rand(1, 1, 32, 128), 0)


def test_later_steps_consume_restored(model):
    dq = torch.rand(1, 1, 32, 128)
    trace = iterate(model, dq, 2)
    r1 = trace.steps[0].restored
    expect = model.restorer(r1, model.recognizer.feature_encode(r1))
    assert torch.equal(trace.steps[1].restored, expect)


@pytest.mark.parametrize("teacher", [False, True])
def test_identity_restorer_collapses_recursion(model, teacher):
    model.restorer = IdentityRestorer()
    labels = model.encode_labels(["abc", "h"]) if teacher else None
    trace = iterate(model, torch.rand(2, 1, 32, 128), 3, teacher=labels)
    first = trace.steps[0]
    for step in trace.steps[1:]:
        assert torch.equal(step.p_lr, first.p_lr)
        assert torch.equal(step.p_rl, first.p_rl)


def test_detach_between_steps(model):
    model.train()
    dq = torch.rand(1, 1, 32, 128)
    hq = torch.rand(1, 1, 32, 128)
    labels = model.encode_labels(["ab"])
    grads = {}
    for detach in (False, True):
        model.zero_grad()
        trace = iterate(model, dq, 2, teacher=labels, detach_between_steps=detach)
        # step-2 pixel term only: detaching removes the path through the step-1 image
        (trace.steps[1].restored - hq).abs().mean().backward()
        grads[detach] = model.restorer.head.weight.grad.clone()
    assert not torch.equal(grads[False], grads[True])


def _perfect_trace(labels, hq, k, steps=2):
    rev = labels.reversed()
    rec = [StepRecord(F.one_hot(labels.targets, k).double(), F.one_hot(rev.targets, k).double(),
                      hq.clone()) for _ in range(steps)]
    return IterationTrace(rec, hq, teacher_forced=True)


def test_total_loss_perfect_is_zero(model):
    labels = model.encode_labels(["abc", "gh"])
    hq = torch.rand(2, 1, 32, 128)
    loss = total_loss(_perfect_trace(labels, hq, model.charset.num_classes), labels, hq,
                      model.cfg)
    assert loss.total.item() == 0.0
    assert loss.rec.item() == 0.0 and loss.pixel.item() == 0.0


def test_total_loss_composition(model):
    labels = model.encode_labels(["abc", "gh"])
    hq = torch.rand(2, 1, 32, 128)
    trace = iterate(model, torch.rand(2, 1, 32, 128), 2, teacher=labels)
    loss = total_loss(trace, labels, hq, model.cfg)
    assert loss.lam == 10.0
    assert loss.total.item() == (loss.rec + 10.0 * loss.pixel).item()
    assert loss.rec.item() == pytest.approx(
        0.5 * (trace.steps[0].rec_loss + trace.steps[1].rec_loss).item())
    zero = total_loss(trace, labels, hq, tiny_cfg(lam=0.0))
    assert zero.total.item() == zero.rec.item()
    assert all(np.isfinite(v.item()) for v in (loss.rec, loss.pixel, loss.total))


def test_total_loss_needs_teacher(model):
    trace = iterate(model, torch.rand(1, 1, 32, 128), 1)
    with pytest.raises(InvalidStateError):
        total_loss(trace, model.encode_labels(["a"]), torch.rand(1, 1, 32, 128), model.cfg)


def test_whole_system_gradient_check():
    torch.manual_seed(11)
    cfg = EngineConfig(c_str=8, c_ir=8, max_t=3, charset="abc", train_steps=2, test_steps=2)
    model = IFR(cfg).double().train()
    labels = model.encode_labels(["ab"])
    dq = torch.rand(1, 1, 32, 128, dtype=torch.float64)
    hq = torch.rand(1, 1, 32, 128, dtype=torch.float64)

    def loss():
        return total_loss(iterate(model, dq, 2, teacher=labels), labels, hq, cfg).total

    rel, _, _, _ = sampled_gradient_errors(model, loss, n_samples=100, step=1e-5)
    assert len(rel) == 100
    assert rel.max() < 1e-4


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(3)
    cfg = tiny_cfg(fusion=(2, 3, 5), lam=4.0)
    model = IFR(cfg)
    model.train()
    with torch.no_grad():
        iterate(model, torch.rand(2, 1, 32, 128), 1)  # move the batch-norm running stats
    path = save_checkpoint(model, cfg, tmp_path / "m.ckpt")
    assert path.read_bytes()[:4] == MAGIC
    loaded, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg
    a, b = model.state_dict(), loaded.state_dict()
    assert a.keys() == b.keys()
    for name in a:
        assert torch.equal(a[name], b[name]), name


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(UnsupportedFormatError, match="magic"):
        load_checkpoint(p)


def test_checkpoint_bad_version(tmp_path, model):
    p = save_checkpoint(model, model.cfg, tmp_path / "m.ckpt")
    data = bytearray(p.read_bytes())
    data[4:8] = struct.pack("<I", 99)
    p.write_bytes(bytes(data))
    with pytest.raises(UnsupportedFormatError, match="version 99"):
        load_checkpoint(p)


class _Oracle(nn.Module):
    """Recognizes by image lookup and restores by passing the image through."""

    def __init__(self, cfg, table):
        super().__init__()
        self.cfg = cfg
        self.table = table
        outer = self

        class Rec(nn.Module):
            def feature_encode(self, img):
                return [img]

            def compute_attention(self, feats):
                return None, None

            def recognize_bidirectional(self, feats, a, b, charset):
                found = [Recognition(outer.table[x.numpy().tobytes()], "lr", 0.0)
                         for x in feats[0]]
                return found, None, None

        self.recognizer = Rec()
        self.restorer = IdentityRestorer()
        self.charset = None


def test_evaluate_perfect_stub(toy):
    data = PairedDataset(toy)
    table = {torch.from_numpy(h.astype(np.float32))[None].numpy().tobytes(): lab
             for h, lab in zip(data.hq, data.labels)}
    stub = _Oracle(tiny_cfg(), table)
    report = evaluate(stub, data, stub.cfg, 3, degrade_with=lambda hq, seed: hq, batch_size=5)
    assert [r.step for r in report.rows] == [1, 2, 3]
    for r in report.rows:
        assert r.accuracy == 1.0 and r.ssim == 1.0 and r.psnr == 100.0
    assert report.n == 12


def test_evaluate_order_invariant(toy, model):
    lines = open(toy, encoding="utf-8").read().splitlines()
    order = np.random.default_rng(0).permutation(len(lines))
    shuffled = toy.parent / "shuffled.jsonl"
    shuffled.write_text("\n".join(lines[i] for i in order) + "\n", encoding="utf-8")
    a = evaluate(model, toy, model.cfg, 2, batch_size=4)
    b = evaluate(model, shuffled, model.cfg, 2, batch_size=4)
    for ra, rb in zip(a.rows, b.rows):
        assert ra.accuracy == pytest.approx(rb.accuracy, abs=1e-9)
        assert ra.psnr == pytest.approx(rb.psnr, abs=1e-9)
        assert ra.ssim == pytest.approx(rb.ssim, abs=1e-9)


def test_evaluate_empty_manifest(tmp_path, model):
    empty = tmp_path / "manifest.jsonl"
    empty.write_text("", encoding="utf-8")
    with pytest.raises(ValueError, match="empty"):
        evaluate(model, empty, model.cfg, 1)


def test_evaluate_rejects_zero_steps(toy, model):
    with pytest.raises(ValueError):
        evaluate(model, toy, model.cfg, 0)


def test_eval_csv(toy, tmp_path, model):
    report = evaluate(model, toy, model.cfg, 2)
    path = write_eval_csv(report, tmp_path / "report.csv")
    rows = list(csv.reader(open(path, encoding="utf-8")))
    assert tuple(rows[0]) == EVAL_COLUMNS == ("step", "accuracy", "ssim", "psnr")
    assert [r[0] for r in rows[1:]] == ["1", "2"]


def _train_tiny(toy, out, seed=0):
    cfg = EngineConfig(c_str=8, c_ir=8, max_t=6, charset=CHARSET, train_steps=2, test_steps=2)
    sched = TrainConfig(epochs=6, batch_size=4, seed=seed)
    return train(cfg, sched, toy, toy, out)


def test_train_outputs(toy, tmp_path):
    res = _train_tiny(toy, tmp_path / "run")
    rows = list(csv.DictReader(open(res.log, encoding="utf-8")))
    assert list(rows[0].keys()) == train_log_columns(2)
    assert [float(r["lr"]) for r in rows] == pytest.approx([1, 1, 1, 1, 0.1, 0.01])
    assert res.best.exists() and res.last.exists()
    for r in rows:
        assert float(r["total_loss"]) == pytest.approx(
            float(r["rec_loss"]) + 10 * float(r["pixel_loss"]), rel=1e-6)
    load_checkpoint(res.last)


def test_train_reproducible(toy, tmp_path):
    a = _train_tiny(toy, tmp_path / "a").history
    b = _train_tiny(toy, tmp_path / "b").history
    assert len(a) == len(b)
    for ra, rb in zip(a, b):
        for k in ra:
            assert ra[k] == pytest.approx(rb[k], abs=1e-9)


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_train_unwritable(toy, tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    try:
        with pytest.raises(OSError, match="not writable"):
            _train_tiny(toy, locked / "out")
    finally:
        locked.chmod(0o700)


def test_train_output_path_is_file(toy, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="not writable"):
        _train_tiny(toy, blocker / "out")
