import numpy as np
import pytest

from vqgen import multimodal as mm
from vqgen import model as md
from vqgen import numerics as nm

SPECIAL = md.SpecialTokens()


def region(df=6, seed=0, relevance=1.0):
    rng = np.random.default_rng(seed)
    return mm.ObjectRegion(
        features=rng.normal(size=df), box=rng.random(4), relevance=relevance
    )


class TestObjectEmbedding:
    def test_concatenation_order(self):
        r = mm.ObjectRegion(
            features=np.arange(1, 7) / 10.0, box=[0.1, 0.2, 0.3, 0.4], relevance=1.0
        )
        o = mm.object_embedding(r)
        assert o.shape == (10,)
        assert np.allclose(o[-4:], [0.1, 0.2, 0.3, 0.4])

    def test_zero_region(self):
        r = mm.ObjectRegion(features=np.zeros(6), box=np.zeros(4), relevance=0.0)
        assert np.array_equal(mm.object_embedding(r), np.zeros(10))

    def test_features_prefix_exact(self):
        r = region(df=9, seed=3)
        assert np.array_equal(mm.object_embedding(r)[:9], r.features)

    def test_box_out_of_range_rejected(self):
        with pytest.raises(mm.InputError):
            mm.ObjectRegion(features=np.zeros(4), box=[0.0, 0.5, 1.2, 0.1], relevance=1.0)


class TestVisualSequence:
    def test_order_enforced(self):
        with pytest.raises(mm.InputError):
            mm.VisualSequence([region(seed=0, relevance=0.1), region(seed=1, relevance=0.9)])

    def test_from_regions_sorts_with_stable_ties(self):
        a = region(seed=0, relevance=0.5)
        b = region(seed=1, relevance=0.9)
        c = region(seed=2, relevance=0.5)
        vs = mm.VisualSequence.from_regions([a, b, c])
        assert vs.regions == [b, a, c]


class TestProjectRegion:
    def make_proj(self, d_in=10, d_out=4, seed=0):
        rng = np.random.default_rng(seed)
        return mm.CrossModalProjection(
            weight=nm.Parameter("projection.weight", rng.normal(size=(d_in, d_out))),
            bias=nm.Parameter("projection.bias", rng.normal(size=d_out)),
        )

    def test_zero_input_gives_bias(self):
        proj = self.make_proj()
        out = mm.project_region(np.zeros(10), proj)
        assert np.allclose(out.data, proj.bias.value.data)

    def test_zero_map_gives_zero(self):
        proj = mm.CrossModalProjection(
            weight=nm.Parameter("projection.weight", np.zeros((10, 4))),
            bias=nm.Parameter("projection.bias", np.zeros(4)),
        )
        assert np.array_equal(mm.project_region(np.ones(10), proj).data, np.zeros(4))

    def test_matches_affine_oracle(self):
        proj = self.make_proj(seed=7)
        rng = np.random.default_rng(8)
        o = rng.normal(size=10)
        expected = np.zeros(4)
        for j in range(4):
            expected[j] = proj.bias.value.data[j]
            for k in range(10):
                expected[j] += o[k] * proj.weight.value.data[k, j]
        out = mm.project_region(o, proj)
        assert np.max(np.abs(out.data - expected)) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(nm.ShapeError):
            mm.project_region(np.zeros(7), self.make_proj())


class TestAssembleInput:
    def visual(self, n=2):
        return mm.VisualSequence(
            [region(seed=i, relevance=float(n - i)) for i in range(n)]
        )

    def test_image_plus_caption_layout(self):
        out = mm.assemble_input(
            mm.IMAGE_PLUS_CAPTION,
            visual=self.visual(2),
            caption=[10, 11],
            cls_id=SPECIAL.cls,
            sep_id=SPECIAL.sep,
        )
        assert len(out) == 6
        assert out.slots[0] == SPECIAL.cls
        assert isinstance(out.slots[1], np.ndarray)
        assert isinstance(out.slots[2], np.ndarray)
        assert out.slots[3] == SPECIAL.sep
        assert out.slots[4:] == [10, 11]
        assert list(out.positions) == [0, 1, 2, 3, 4, 5]
        assert out.visual_span == (1, 3)
        assert out.text_span == (4, 6)

    def test_caption_only_empty_caption(self):
        out = mm.assemble_input(
            mm.CAPTION_ONLY, caption=[], cls_id=SPECIAL.cls, sep_id=SPECIAL.sep
        )
        assert len(out) == 1
        assert out.slots == [SPECIAL.cls]

    def test_image_only_has_no_sep(self):
        out = mm.assemble_input(
            mm.IMAGE_ONLY, visual=self.visual(3), cls_id=SPECIAL.cls, sep_id=SPECIAL.sep
        )
        assert len(out) == 4
        assert all(isinstance(s, np.ndarray) for s in out.slots[1:])

    def test_lengths_by_mode(self):
        n, m = 3, 4
        caption = list(range(10, 10 + m))
        v = self.visual(n)
        cap = mm.assemble_input(mm.CAPTION_ONLY, caption=caption, cls_id=2, sep_id=3)
        img = mm.assemble_input(mm.IMAGE_ONLY, visual=v, cls_id=2, sep_id=3)
        both = mm.assemble_input(
            mm.IMAGE_PLUS_CAPTION, visual=v, caption=caption, cls_id=2, sep_id=3
        )
        assert (len(cap), len(img), len(both)) == (1 + m, 1 + n, 2 + n + m)

    def test_missing_modality(self):
        with pytest.raises(mm.InputError):
            mm.assemble_input(mm.IMAGE_ONLY, cls_id=2, sep_id=3)
        with pytest.raises(mm.InputError):
            mm.assemble_input(mm.IMAGE_PLUS_CAPTION, visual=self.visual(), cls_id=2, sep_id=3)

    def test_caption_length_limit(self):
        with pytest.raises(mm.InputError):
            mm.assemble_input(
                mm.CAPTION_ONLY, caption=list(range(10)), cls_id=2, sep_id=3, max_caption=5
            )

    def test_reordering_regions_only_swaps_slots(self):
        a, b = region(seed=0, relevance=0.9), region(seed=1, relevance=0.5)
        fwd = mm.assemble_input(
            mm.IMAGE_ONLY, visual=mm.VisualSequence([a, b]), cls_id=2, sep_id=3
        )
        swapped = mm.assemble_input(
            mm.IMAGE_ONLY,
            visual=mm.VisualSequence([mm.ObjectRegion(b.features, b.box, 0.9),
                                      mm.ObjectRegion(a.features, a.box, 0.5)]),
            cls_id=2,
            sep_id=3,
        )
        assert np.array_equal(fwd.slots[1], swapped.slots[2])
        assert np.array_equal(fwd.slots[2], swapped.slots[1])
        assert np.array_equal(fwd.positions, swapped.positions)
