import numpy as np
import pytest

from filtershare import autodiff as ad
from filtershare.errors import ContractError, ShapeError
from filtershare.tensor import Tensor


def fd_directional(f, params, delta, h=1e-5):
    """Central-difference directional derivative along delta (one array per
    param), an oracle independent of the tape."""
    originals = [p.value for p in params]

    def shift(sign):
        for p, base, d in zip(params, originals, delta):
            p.value = Tensor(base.array + sign * h * d)
        try:
            return f()
        finally:
            for p, base in zip(params, originals):
                p.value = base

    return (shift(+1.0) - shift(-1.0)) / (2.0 * h)


class TestForward:
    def test_identity_program_empty_tape(self):
        x = Tensor([1.0, 2.0])
        out, tape = ad.forward(lambda v: v, inputs=[x])
        assert np.array_equal(out.array, x.array)
        assert len(tape) == 0

    def test_dot_program(self):
        w = ad.Parameter("w", [1.0, 2.0])
        out, _ = ad.forward(lambda x: ad.dot(w, x), inputs=[Tensor([3.0, 4.0])])
        assert out.tolist() == [11.0]

    def test_replay_is_bitwise_deterministic(self, rng):
        w = ad.Parameter("w", rng.normal(size=(4, 4)))
        x = Tensor(rng.normal(size=(4, 4)))

        def program(v):
            return ad.sum_all(ad.relu(ad.mul(w, v)))

        out1, _ = ad.forward(program, inputs=[x])
        out2, _ = ad.forward(program, inputs=[x])
        assert np.array_equal(out1.array, out2.array)


class TestBackward:
    def test_linear_function_grad(self):
        w = ad.Parameter("w", [1.0, 1.0])
        x = Tensor([3.0, 4.0])
        _, tape = ad.forward(lambda: ad.dot(w, x))
        ad.backward(tape, Tensor([1.0]))
        assert w.grad.tolist() == [3.0, 4.0]

    def test_relu_subgradient(self):
        w = ad.Parameter("w", [-1.0, 2.0])
        _, tape = ad.forward(lambda: ad.sum_all(ad.relu(w)))
        ad.backward(tape, Tensor([1.0]))
        assert w.grad.tolist() == [0.0, 1.0]

    def test_seed_shape_mismatch(self):
        w = ad.Parameter("w", [1.0, 2.0])
        _, tape = ad.forward(lambda: ad.relu(w))
        with pytest.raises(ShapeError):
            ad.backward(tape, Tensor([1.0]))

    def test_three_layer_program_matches_fd(self, rng):
        w1 = ad.Parameter("w1", rng.normal(size=(3, 5)))
        b1 = ad.Parameter("b1", rng.normal(size=3))
        w2 = ad.Parameter("w2", rng.normal(size=(2, 3)))
        params = [w1, b1, w2]
        x = Tensor(rng.normal(size=5))

        def program():
            h = ad.relu(ad.affine(w1, x, b1))
            out = ad.affine(w2, h, Tensor([0.0, 0.0]))
            return ad.sum_all(ad.sigmoid(out))

        _, tape = ad.forward(program)
        ad.zero_grads(params)
        ad.backward(tape, Tensor([1.0]))
        for p in params:
            flat = p.grad.reshape(-1)
            for ci in range(flat.size):
                delta = [np.zeros(q.value.shape) for q in params]
                delta[params.index(p)].reshape(-1)[ci] = 1.0
                numeric = fd_directional(
                    lambda: ad.forward(program)[0].item(), params, delta)
                rel = abs(flat[ci] - numeric) / (abs(flat[ci]) + abs(numeric) + 1)
                assert rel < 1e-6

    def test_accumulation_multiple_backward(self, rng):
        w = ad.Parameter("w", rng.normal(size=4))
        _, tape = ad.forward(lambda: ad.sum_all(ad.mul(w, w)))
        ad.backward(tape, Tensor([1.0]))
        once = w.grad.copy()
        ad.backward(tape, Tensor([1.0]))
        assert np.array_equal(w.grad, 2.0 * once)

    def test_grad_of_sum_is_sum_of_grads(self, rng):
        w = ad.Parameter("w", rng.normal(size=4))
        x1 = Tensor(rng.normal(size=4))
        x2 = Tensor(rng.normal(size=4))

        def p1():
            return ad.dot(w, x1)

        def p2():
            return ad.dot(w, x2)

        ad.zero_grads([w])
        _, t1 = ad.forward(p1)
        ad.backward(t1, Tensor([1.0]))
        g1 = w.grad.copy()
        ad.zero_grads([w])
        _, t2 = ad.forward(p2)
        ad.backward(t2, Tensor([1.0]))
        g2 = w.grad.copy()
        ad.zero_grads([w])
        _, t3 = ad.forward(lambda: ad.add(p1(), p2()))
        ad.backward(t3, Tensor([1.0]))
        assert np.array_equal(w.grad, g1 + g2)

    def test_parameter_as_output(self):
        w = ad.Parameter("w", [1.0, 2.0])
        _, tape = ad.forward(lambda: w)
        ad.backward(tape, Tensor([5.0, 7.0]))
        assert w.grad.tolist() == [5.0, 7.0]


class TestPrimitiveDotProducts:
    """Every primitive passes the directional-derivative (dot-product) test."""

    CASES = []

    def _scalarize(op_out, probe):
        return ad.sum_all(ad.mul(op_out, Tensor(probe)))

    @pytest.mark.parametrize("name", [
        "add", "sub", "mul", "scale", "relu", "sigmoid", "dot", "conv_valid",
        "conv_stack", "pad_spatial", "channel_bias", "max_pool",
        "upsample_nearest", "concat_channels", "global_avg_pool", "affine",
        "apply_mask", "mix_filters", "squeeze_leading", "sum_all",
    ])
    def test_primitive(self, name, rng):
        progs = self._programs(rng)
        program, params = progs[name]
        _, tape = ad.forward(program)
        ad.zero_grads(params)
        ad.backward(tape, Tensor([1.0]))
        delta = [rng.normal(size=p.value.shape) for p in params]
        analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, delta))
        numeric = fd_directional(lambda: ad.forward(program)[0].item(),
                                 params, delta)
        rel = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)
        assert rel < 1e-6, f"{name}: analytic {analytic} vs numeric {numeric}"

    def _programs(self, rng):
        a = ad.Parameter("a", rng.normal(size=(3, 4)))
        b = ad.Parameter("b", rng.normal(size=(3, 4)))
        vec1 = ad.Parameter("vec1", rng.normal(size=6))
        vec2 = ad.Parameter("vec2", rng.normal(size=6))
        img = ad.Parameter("img", rng.normal(size=(2, 6, 6)))
        one_map = ad.Parameter("one_map", rng.normal(size=(1, 4, 4)))
        filt = ad.Parameter("filt", rng.normal(size=(3, 2, 3, 3)))
        seeds = ad.Parameter("seeds", rng.normal(size=(2, 3, 3)))
        alpha = ad.Parameter("alpha", rng.normal(size=(3, 2, 2)))
        bias3 = ad.Parameter("bias3", rng.normal(size=3))
        w = ad.Parameter("w", rng.normal(size=(4, 6)))
        bw = ad.Parameter("bw", rng.normal(size=4))
        xmap = ad.Parameter("xmap", rng.normal(size=(5, 5)))
        kmap = ad.Parameter("kmap", rng.normal(size=(2, 2)))
        probe = {
            "mat": Tensor(rng.normal(size=(3, 4))),
            "convout": Tensor(rng.normal(size=(3, 4, 4))),
            "pool": Tensor(rng.normal(size=(2, 3, 3))),
            "pad": Tensor(rng.normal(size=(2, 8, 8))),
            "up": Tensor(rng.normal(size=(2, 12, 12))),
            "cat": Tensor(rng.normal(size=(4, 6, 6))),
            "gap": Tensor(rng.normal(size=2)),
            "aff": Tensor(rng.normal(size=4)),
            "map": Tensor(rng.normal(size=(4, 4))),
            "sq": Tensor(rng.normal(size=(4, 4))),
            "mix": Tensor(rng.normal(size=(3, 2, 3, 3))),
        }
        mask = (rng.random((3, 4)) > 0.4) / 0.6

        def tie(out, key):
            return ad.sum_all(ad.mul(out, probe[key]))

        return {
            "add": (lambda: tie(ad.add(a, b), "mat"), [a, b]),
            "sub": (lambda: tie(ad.sub(a, b), "mat"), [a, b]),
            "mul": (lambda: tie(ad.mul(a, b), "mat"), [a, b]),
            "scale": (lambda: tie(ad.scale(a, -1.7), "mat"), [a]),
            "relu": (lambda: tie(ad.relu(a), "mat"), [a]),
            "sigmoid": (lambda: tie(ad.sigmoid(a), "mat"), [a]),
            "dot": (lambda: ad.dot(vec1, vec2), [vec1, vec2]),
            "sum_all": (lambda: ad.sum_all(a), [a]),
            "conv_valid": (lambda: tie(ad.conv_valid(xmap, kmap), "map"),
                           [xmap, kmap]),
            "conv_stack": (lambda: tie(ad.conv_stack(img, filt), "convout"),
                           [img, filt]),
            "pad_spatial": (lambda: tie(ad.pad_spatial(img, (1, 1)), "pad"),
                            [img]),
            "channel_bias": (lambda: tie(ad.channel_bias(
                ad.conv_stack(img, filt), bias3), "convout"), [img, filt, bias3]),
            "max_pool": (lambda: tie(ad.max_pool(img, 2), "pool"), [img]),
            "upsample_nearest": (lambda: tie(ad.upsample_nearest(img, 2), "up"),
                                 [img]),
            "concat_channels": (lambda: tie(ad.concat_channels(img, img), "cat"),
                                [img]),
            "global_avg_pool": (lambda: tie(ad.global_avg_pool(img), "gap"),
                                [img]),
            "affine": (lambda: tie(ad.affine(w, vec1, bw), "aff"),
                       [w, vec1, bw]),
            "apply_mask": (lambda: tie(ad.apply_mask(a, mask), "mat"), [a]),
            "mix_filters": (lambda: tie(ad.mix_filters(seeds, alpha), "mix"),
                            [seeds, alpha]),
            "squeeze_leading": (lambda: tie(ad.squeeze_leading(one_map), "sq"),
                                [one_map]),
        }


class TestGradCheck:
    def test_quadratic_passes(self):
        w = ad.Parameter("w", [1.0, 2.0])
        report = ad.grad_check(lambda: ad.sum_all(ad.mul(w, w)), [w])
        assert report.passed
        analytic = {r.coord: r.analytic for r in report.rows}
        assert analytic == {0: pytest.approx(2.0), 1: pytest.approx(4.0)}

    def test_non_scalar_program_rejected(self):
        w = ad.Parameter("w", [1.0, 2.0])
        with pytest.raises(ContractError):
            ad.grad_check(lambda: ad.relu(w), [w])

    def test_corrupted_backward_rule_fails(self, rng):
        w = ad.Parameter("w", rng.normal(size=8))
        ad.set_fault_injection(True)
        try:
            report = ad.grad_check(lambda: ad.sum_all(ad.relu(w)), [w])
        finally:
            ad.set_fault_injection(False)
        assert not report.passed

    def test_coordinate_subsampling(self, rng):
        w = ad.Parameter("w", rng.normal(size=64))
        report = ad.grad_check(lambda: ad.sum_all(ad.mul(w, w)), [w],
                               coord_budget=10)
        assert 1 <= len(report.rows) <= 10
        assert report.passed

    def test_csv_report_format(self, tmp_path):
        w = ad.Parameter("w", [1.0, -2.0])
        report = ad.grad_check(lambda: ad.sum_all(ad.mul(w, w)), [w])
        path = tmp_path / "report.csv"
        report.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "param_id,coord,analytic,numeric,rel_err"
        assert len(lines) == 3
