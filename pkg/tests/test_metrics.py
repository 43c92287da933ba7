import numpy as np
import pytest

from hqbackdoor import tensor as T
from hqbackdoor.attacks import Patch, Qcolor
from hqbackdoor.dataset import LabeledDataset
from hqbackdoor.metrics import (EvalReport, SsimConfig, asr_eligible, attack_success_rate, backdoor_accuracy,
                                batch_ssim, clean_accuracy, evaluate, grad_cam, mean_ssim, ssim)
from hqbackdoor.model import HybridModel, ModelArch


class Const:
    def __init__(self, label):
        self.label = label

    def predict(self, X):
        return np.full(len(X), self.label)


class RedStump:
    """Predicts ``target`` when the red channel is clearly darker than green."""

    def __init__(self, target, other):
        self.target, self.other = target, other

    def predict(self, X):
        ratio = X[:, 0].mean(axis=(1, 2)) / X[:, 1].mean(axis=(1, 2))
        return np.where(ratio < 0.8, self.target, self.other)


def ds_with(labels, size=4, seed=0):
    labels = np.asarray(labels)
    x = np.random.default_rng(seed).uniform(0.5, 1.0, size=(len(labels), 3, size, size))
    return LabeledDataset(x, labels, n_classes=10)


class TestAccuracy:
    def test_perfect(self):
        assert clean_accuracy(Const(3), ds_with([3] * 6)) == 100.0

    def test_all_wrong(self):
        assert clean_accuracy(Const(1), ds_with([3] * 6)) == 0.0

    def test_seven_of_ten(self):
        assert clean_accuracy(Const(2), ds_with([2] * 7 + [5] * 3)) == 70.0

    def test_empty(self):
        with pytest.raises(ValueError):
            clean_accuracy(Const(0), ds_with([]).subset(np.array([], dtype=int)))

    def test_ba_shares_code_path(self):
        assert backdoor_accuracy is clean_accuracy


class TestAsr:
    def test_excludes_target(self):
        ds = ds_with([0, 1, 2, 0, 3])
        assert asr_eligible(ds, 0).tolist() == [1, 2, 4]
        assert attack_success_rate(Const(0), ds, Patch(1), 0) == 100.0

    def test_identity_trigger_never_target(self):
        assert attack_success_rate(Const(4), ds_with([1, 2, 3]), Qcolor(), 0) == 0.0

    def test_red_stump(self):
        ds = ds_with(np.arange(20) % 10, seed=3)
        stump = RedStump(0, 1)
        assert attack_success_rate(stump, ds, Qcolor(0.6, 1, 1), 0) == 100.0
        assert attack_success_rate(stump, ds, Qcolor(), 0) == 0.0

    def test_no_eligible(self):
        with pytest.raises(ValueError):
            attack_success_rate(Const(0), ds_with([0, 0]), Patch(1), 0)


def ssim_oracle(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0):
    """Explicit loop over every fully contained window of every channel."""
    r = np.arange(window) - (window - 1) / 2
    g1 = np.exp(-r ** 2 / (2 * sigma ** 2))
    w = np.outer(g1, g1)
    w /= w.sum()
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    vals = []
    for c in range(a.shape[0]):
        for i in range(a.shape[1] - window + 1):
            for j in range(a.shape[2] - window + 1):
                pa = a[c, i:i + window, j:j + window]
                pb = b[c, i:i + window, j:j + window]
                ma, mb = np.sum(w * pa), np.sum(w * pb)
                va = np.sum(w * (pa - ma) ** 2)
                vb = np.sum(w * (pb - mb) ** 2)
                cov = np.sum(w * (pa - ma) * (pb - mb))
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestSsim:
    def test_identity_exact(self, rng):
        for _ in range(20):
            x = rng.uniform(size=(3, 16, 16))
            assert ssim(x, x) == 1.0

    def test_oracle_100_pairs(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(100):
            a = rng.uniform(size=(3, 16, 16))
            b = np.clip(a + rng.normal(scale=rng.uniform(0.01, 0.5), size=a.shape), 0, 1)
            worst = max(worst, abs(ssim(a, b) - ssim_oracle(a, b)))
        assert worst <= 1e-6

    def test_symmetric_and_range(self, rng):
        for _ in range(20):
            a, b = rng.uniform(size=(2, 3, 16, 16))
            s = ssim(a, b)
            assert s == pytest.approx(ssim(b, a), abs=1e-15)
            assert -1.0 <= s <= 1.0
            assert s < 1.0

    def test_qcolor_identity(self, rng):
        x = rng.uniform(size=(4, 3, 16, 16))
        assert mean_ssim(x, Qcolor(1, 1, 1)) == 1.0

    def test_stealth_degrades(self, rng):
        x = rng.uniform(0.2, 0.9, size=(10, 3, 16, 16))
        assert mean_ssim(x, Qcolor(0.95, 1, 1)) > mean_ssim(x, Qcolor(0.6, 1, 1))

    def test_batch_matches_single(self, rng):
        a, b = rng.uniform(size=(2, 3, 3, 16, 16))
        np.testing.assert_allclose(batch_ssim(a, b), [ssim(a[i], b[i]) for i in range(3)], atol=1e-15)

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            ssim(rng.uniform(size=(3, 16, 16)), rng.uniform(size=(3, 16, 15)))
        with pytest.raises(ValueError):
            ssim(rng.uniform(size=(3, 8, 8)), rng.uniform(size=(3, 8, 8)))
        with pytest.raises(ValueError):
            SsimConfig(window=10)
        with pytest.raises(ValueError):
            SsimConfig(k1=0)

    def test_window_sums_to_one(self):
        assert SsimConfig().kernel_1d().sum() == pytest.approx(1.0, abs=1e-15)


def test_evaluate_report(rng):
    ds = ds_with(np.arange(30) % 10, size=16, seed=1)
    rep = evaluate(Const(0), RedStump(0, 1), ds, Qcolor(0.6, 1, 1), 0, model_id="m", p=0.1, seed=3)
    assert rep.asr == 100.0 and rep.ca == 10.0 and rep.n_asr == 27
    assert list(rep.row()) == ["model_id", "trigger", "p", "ca", "ba", "asr", "mean_ssim", "seed"]
    with pytest.raises(ValueError):
        EvalReport("m", "t", 0.1, 101.0, 0.0, 0.0, 1.0, 0)


class OneConv:
    """Single conv layer; channel 1 has zero weights and so never activates."""

    def __init__(self, kernel, head):
        self.kernel = T.Tensor(kernel, requires_grad=True)
        self.head = head

    def forward(self, x, keep=None):
        a = T.relu(T.conv2d(T.as_tensor(x), self.kernel, np.zeros(2), padding=1))
        flat = T.reshape(a, (a.shape[0], -1))
        logits = T.linear(flat, self.head, np.zeros(self.head.shape[0]))
        if keep is not None:
            keep["conv2"] = a
        return logits


class TestGradCam:
    def test_single_active_channel(self, rng):
        k = np.zeros((2, 3, 3, 3))
        k[0] = rng.normal(size=(3, 3, 3))
        hw = 8 * 8
        head = np.zeros((2, 2 * hw))
        head[1, :hw] = 0.5 / hw
        model = OneConv(k, head)
        x = rng.uniform(size=(3, 8, 8))
        cam = grad_cam(model, x, 1)
        act = np.maximum(T.conv2d(x[None], k, np.zeros(2), padding=1).data[0, 0], 0)
        np.testing.assert_allclose(cam, act / act.max(), atol=1e-12)

    def test_degenerate_zero(self, rng):
        model = OneConv(np.zeros((2, 3, 3, 3)), rng.normal(size=(2, 2 * 64)))
        cam = grad_cam(model, rng.uniform(size=(3, 8, 8)), 0)
        assert np.all(cam == 0.0)

    def test_range_and_shape(self, rng):
        m = HybridModel.initialize(ModelArch(), 0)
        for c in range(3):
            cam = grad_cam(m, rng.uniform(size=(3, 16, 16)), c)
            assert cam.shape == (16, 16) and cam.min() >= 0 and cam.max() <= 1

    def test_bad_class(self, rng):
        with pytest.raises(ValueError):
            grad_cam(HybridModel.initialize(ModelArch(), 0), rng.uniform(size=(3, 16, 16)), 10)
