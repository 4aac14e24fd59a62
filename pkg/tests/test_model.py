import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmlatch import tensor as T
from mmlatch.data import Batch, MultimodalSample
from mmlatch.model import (
    MODALITIES,
    SENTIMENT_BINS,
    MMLatchModel,
    ModelConfig,
    apply_masks,
    averaged_masks,
    baseline_forward,
    compute_masks,
    export_mask_heatmap,
    stage_one,
    two_stage_forward,
)
from mmlatch.tensor import ShapeError, Tensor
from mmlatch.training import mae_loss

from conftest import TINY_DIMS, max_grad_error, random_batch, tiny_model, weighted_sum

TOL = 1e-4
PAIRS = [(j, k) for j in MODALITIES for k in MODALITIES if j != k]


def reprs(seed=0, grad=False):
    rng = np.random.default_rng(seed)
    return {k: Tensor(rng.normal(size=(2, 3, 4)), requires_grad=grad) for k in MODALITIES}


def const_masks(shapes, value_j, value_l=None):
    value_l = value_j if value_l is None else value_l
    masks = {}
    for k in MODALITIES:
        j, l = (m for m in MODALITIES if m != k)
        masks[(j, k)] = Tensor(np.full(shapes[k], value_j))
        masks[(l, k)] = Tensor(np.full(shapes[k], value_l))
    return masks


class TestComputeMasks:
    def test_zero_feedback_gives_half(self):
        model = tiny_model(init="zero")
        masks = compute_masks(reprs(), model.feedback)
        assert sorted(masks) == sorted(PAIRS)
        for (j, k), m in masks.items():
            assert m.shape == (2, 3, TINY_DIMS[k])
            assert np.all(m.data == 0.5)

    @pytest.mark.parametrize("kind", ["lstm", "feedforward"])
    def test_values_strictly_inside_unit_interval(self, kind):
        model = tiny_model(feedback=kind)
        for m in compute_masks(reprs(seed=4), model.feedback).values():
            assert np.all((m.data > 0) & (m.data < 1))

    @pytest.mark.parametrize("kind", ["lstm", "feedforward"])
    def test_gradient(self, kind):
        model = tiny_model(feedback=kind)
        r = reprs(grad=True)

        def f():
            masks = compute_masks(r, model.feedback)
            return sum((weighted_sum(masks[p], seed=i) for i, p in enumerate(PAIRS)), Tensor(0.0))

        assert max_grad_error(f, list(r.values()) + model.feedback_parameters()) < TOL

    def test_six_projections(self):
        model = tiny_model()
        assert sum(len(p.project) for p in model.feedback.values()) == 6

    def test_shape_mismatch(self):
        model = tiny_model()
        r = reprs()
        r["V"] = Tensor(np.zeros((2, 4, 4)))
        with pytest.raises(ShapeError):
            compute_masks(r, model.feedback)


class TestApplyMasks:
    def inputs(self):
        b = random_batch()
        return {k: Tensor(v) for k, v in b.features.items()}

    def test_ones_is_identity(self):
        x = self.inputs()
        out = apply_masks(x, const_masks({k: v.shape for k, v in x.items()}, 1.0))
        for k in MODALITIES:
            np.testing.assert_array_equal(out[k].data, x[k].data)

    def test_one_and_zero_halve(self):
        x = self.inputs()
        out = apply_masks(x, const_masks({k: v.shape for k, v in x.items()}, 1.0, 0.0))
        for k in MODALITIES:
            np.testing.assert_array_equal(out[k].data, 0.5 * x[k].data)

    def test_zero_feedback_halves(self):
        model = tiny_model(init="zero")
        x = self.inputs()
        out = apply_masks(x, stage_one(x, model))
        for k in MODALITIES:
            np.testing.assert_array_equal(out[k].data, 0.5 * x[k].data)

    def test_shape_mismatch(self):
        x = self.inputs()
        masks = const_masks({k: (2, 3, 1) for k in MODALITIES}, 1.0)
        with pytest.raises(ShapeError):
            apply_masks(x, masks)

    @settings(max_examples=40, deadline=None)
    @given(
        arrays(np.float64, (2, 3, 5), elements=st.floats(-10, 10, allow_subnormal=False)),
        arrays(np.float64, (2, 3, 5), elements=st.floats(1e-6, 1 - 1e-6)),
        arrays(np.float64, (2, 3, 5), elements=st.floats(1e-6, 1 - 1e-6)),
    )
    def test_monotone_attenuation(self, x, f_j, f_l):
        inputs = {k: Tensor(x) for k in MODALITIES}
        masks = {}
        for k in MODALITIES:
            j, l = (m for m in MODALITIES if m != k)
            masks[(j, k)], masks[(l, k)] = Tensor(f_j), Tensor(f_l)
        avg = 0.5 * (f_j + f_l)
        assert np.all((avg > 0) & (avg < 1))
        out = apply_masks(inputs, masks)["A"].data
        nonzero = x != 0
        assert np.all(np.abs(out[nonzero]) < np.abs(x[nonzero]))


class TestForwardPasses:
    def test_mask_identity_equals_baseline(self, batch):
        model = tiny_model()
        two = two_stage_forward(batch, model, masks="ones").data
        base = baseline_forward(batch, model).data
        np.testing.assert_array_equal(two, base)

    def test_zero_feedback_equals_half_scaled_baseline(self, batch):
        model = tiny_model(init="zero")
        halved = Batch({k: 0.5 * v for k, v in batch.features.items()}, batch.labels)
        np.testing.assert_array_equal(
            two_stage_forward(batch, model).data, baseline_forward(halved, model).data
        )

    def test_baseline_deterministic_in_eval(self, batch):
        a = baseline_forward(batch, tiny_model(dropout=0.2)).data
        b = baseline_forward(batch, tiny_model(dropout=0.2)).data
        np.testing.assert_array_equal(a, b)

    def test_encoder_gradients_ignore_stage_one(self, batch):
        model = tiny_model()

        def encoder_grads(**kwargs):
            model.zero_grad()
            T.backward(mae_loss(two_stage_forward(batch, model, **kwargs), batch.labels))
            return [p.grad.copy() for p in model.encoder_parameters()]

        isolated = encoder_grads()
        detached = encoder_grads(detach_masks=True)
        leaky = encoder_grads(isolate_encoders=False)
        for a, b in zip(isolated, detached):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)
        # letting gradient through Stage I would change them
        assert max(np.abs(a - c).max() for a, c in zip(isolated, leaky)) > 1e-8

    def test_feedback_parameters_receive_gradient(self, batch):
        model = tiny_model()
        T.backward(mae_loss(two_stage_forward(batch, model), batch.labels))
        grads = [np.abs(p.grad).max() for p in model.feedback_parameters()]
        assert all(g > 0 for g in grads)

    def test_model_call_routes_by_feedback_type(self, batch):
        base = tiny_model(feedback="none")
        assert base.feedback is None
        np.testing.assert_array_equal(base(batch).data, baseline_forward(batch, base).data)
        fb = tiny_model()
        np.testing.assert_array_equal(fb(batch).data, two_stage_forward(batch, fb).data)

    def test_misaligned_modalities(self):
        b = random_batch()
        b.features["T"] = b.features["T"][:, :2, :]
        with pytest.raises(ShapeError, match="aligned"):
            baseline_forward(b, tiny_model())

    def test_stage_one_requires_feedback(self, batch):
        with pytest.raises(ValueError):
            two_stage_forward(batch, tiny_model(feedback="none"))


def labelled_samples(labels, dims=TINY_DIMS, length=3, seed=0):
    rng = np.random.default_rng(seed)
    return [
        MultimodalSample(*(rng.normal(size=(length, dims[k])) for k in MODALITIES), label)
        for label in labels
    ]


class TestHeatmap:
    def test_zero_feedback_gives_half_everywhere(self):
        model = tiny_model(init="zero")
        maps = export_mask_heatmap(model, labelled_samples([-3, -2, -1, 0, 1, 2, 3]))
        for k in MODALITIES:
            assert maps[k].values.shape == (TINY_DIMS[k], 7)
            assert np.all(maps[k].values == 0.5)

    def test_facet_sized_visual_stream(self):
        dims = {"A": 5, "T": 4, "V": 35}
        model = tiny_model(dims=dims)
        maps = export_mask_heatmap(model, labelled_samples(np.linspace(-3, 3, 14), dims=dims))
        assert maps["V"].values.shape == (35, 7)
        assert np.all((maps["V"].values > 0) & (maps["V"].values < 1))

    def test_averages_over_timesteps_and_samples(self):
        model = tiny_model()
        samples = labelled_samples([0.9, 1.2, -2.0])
        maps = export_mask_heatmap(model, samples, batch_size=2)
        batch = Batch({k: np.stack([s.features[k] for s in samples[:2]]) for k in MODALITIES}, np.zeros((2, 1)))
        expected = averaged_masks(batch, model)["A"].mean(axis=(0, 1))
        np.testing.assert_allclose(maps["A"].values[:, 4], expected, atol=1e-14)
        assert maps["A"].counts.tolist() == [0, 1, 0, 0, 2, 0, 0]

    def test_empty_bins_flagged(self, tmp_path):
        model = tiny_model()
        maps = export_mask_heatmap(model, labelled_samples([0.1, 2.6]))
        assert maps["T"].missing.tolist() == [True, True, True, False, True, True, False]
        assert np.isnan(maps["T"].values[:, 0]).all()
        maps["T"].to_csv(tmp_path / "t.csv")
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert tuple(rows[0]) == SENTIMENT_BINS
        assert len(rows) == 1 + TINY_DIMS["T"]
        assert all(len(r) == 7 for r in rows)
        assert rows[1][0] == "NA" and rows[1][3] != "NA"

    def test_refuses_baseline_model(self):
        with pytest.raises(ValueError):
            export_mask_heatmap(tiny_model(feedback="none"), labelled_samples([0.0]))
