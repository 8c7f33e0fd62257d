import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from dgad.pretext import (Protocol, TransformSpec, apply_transform, decode_label, encode_label,
                          enumerate_transforms, jigsaw_permutations, normal_label, rotate, sample_transform)


def brute_rot90_ccw(img: np.ndarray) -> np.ndarray:
    # out[i, j] = in[j, n-1-i] for a counter-clockwise quarter turn
    n = img.shape[0]
    out = np.empty_like(img)
    for i in range(n):
        for j in range(n):
            out[i, j] = img[j, n - 1 - i]
    return out


def quadrant_image(values=(1.0, 2.0, 3.0, 4.0), size=4):
    h = size // 2
    img = torch.zeros(1, size, size)
    img[0, :h, :h], img[0, :h, h:], img[0, h:, :h], img[0, h:, h:] = values
    return img


def quadrant_values(img):
    h = img.shape[-1] // 2
    return [float(q.unique().item()) for q in (img[0, :h, :h], img[0, :h, h:], img[0, h:, :h], img[0, h:, h:])]


class TestProtocol:
    def test_dimensions(self):
        assert [p.label_dim for p in Protocol] == [4, 6, 18]
        assert [p.num_transforms for p in Protocol] == [4, 6, 384]

    @pytest.mark.parametrize("value", [1, "1", "rotation", Protocol.ROTATION])
    def test_parse(self, value):
        assert Protocol.parse(value) is Protocol.ROTATION


class TestRotate:
    def test_identity(self):
        x = torch.randn(2, 3, 8, 8)
        assert torch.equal(rotate(x, 0), x)

    def test_closure(self):
        x = torch.randn(2, 3, 8, 8)
        assert torch.equal(rotate(rotate(x, 1), 3), x)

    def test_two_by_two_ccw(self):
        a, b, c, d = 1.0, 2.0, 3.0, 4.0
        img = torch.tensor([[[a, b], [c, d]]])
        assert rotate(img, 1)[0].tolist() == [[b, d], [a, c]]

    def test_matches_index_oracle(self):
        img = np.arange(25.0).reshape(5, 5)
        assert np.array_equal(rotate(torch.from_numpy(img), 1).numpy(), brute_rot90_ccw(img))

    def test_rejects_non_square(self):
        with pytest.raises(ValueError, match="square"):
            rotate(torch.zeros(1, 4, 6), 1)

    @settings(max_examples=40, deadline=None)
    @given(k1=st.integers(0, 3), k2=st.integers(0, 3), seed=st.integers(0, 2**16))
    def test_group_law(self, k1, k2, seed):
        x = torch.from_numpy(np.random.default_rng(seed).normal(size=(2, 3, 6, 6)))
        assert torch.equal(rotate(rotate(x, k2), k1), rotate(x, (k1 + k2) % 4))


class TestPermutations:
    def test_identity_first_and_count(self):
        perms = jigsaw_permutations()
        assert perms[0] == (0, 1, 2)
        assert len(perms) == len(set(perms)) == 6

    def test_count_by_enumeration(self):
        displaced = [p for p in itertools.permutations(range(3)) if sum(i != v for i, v in enumerate(p)) >= 2]
        assert len(displaced) + 1 == 6
        for p in jigsaw_permutations()[1:]:
            assert sum(i != v for i, v in enumerate(p)) >= 2

    def test_inverse(self):
        for p in jigsaw_permutations():
            inv = tuple(np.argsort(p))
            assert tuple(p[i] for i in inv) == (0, 1, 2)


class TestApplyTransform:
    def test_identity(self):
        x = torch.randn(2, 3, 8, 8)
        for protocol in Protocol:
            assert torch.equal(apply_transform(x, TransformSpec(protocol)), x)

    def test_two_cycle_is_involution(self):
        x = torch.randn(1, 3, 8, 8)
        perms = jigsaw_permutations()
        # swaps movable slots 1 and 2 (quadrants BL and BR)
        spec = TransformSpec(Protocol.JIGSAW, perm_index=perms.index((0, 2, 1)))
        assert torch.equal(apply_transform(apply_transform(x, spec), spec), x)

    def test_swap_tr_bl_by_quadrant_oracle(self):
        img = quadrant_image()
        idx = jigsaw_permutations().index((1, 0, 2))
        out = apply_transform(img, TransformSpec(Protocol.JIGSAW, perm_index=idx))
        assert quadrant_values(out) == [1.0, 3.0, 2.0, 4.0]

    def test_every_permutation_by_quadrant_oracle(self):
        img = quadrant_image()
        vals = [1.0, 2.0, 3.0, 4.0]
        for idx, perm in enumerate(jigsaw_permutations()):
            expected = [vals[0]] + [vals[1 + perm[j]] for j in range(3)]
            out = apply_transform(img, TransformSpec(Protocol.JIGSAW, perm_index=idx))
            assert quadrant_values(out) == expected

    def test_partition_rotation_applies_per_slot(self):
        x = torch.arange(64.0).reshape(1, 8, 8)
        spec = TransformSpec(Protocol.JIGSAW_ROTATION, perm_index=0, partition_rotations=(0, 1, 0))
        out = apply_transform(x, spec)
        assert torch.equal(out[:, :4, :], x[:, :4, :])
        assert torch.equal(out[:, 4:, :4], torch.rot90(x[:, 4:, :4], 1, dims=(-2, -1)))
        assert torch.equal(out[:, 4:, 4:], x[:, 4:, 4:])

    def test_odd_size_rejected(self):
        with pytest.raises(ValueError, match="even"):
            apply_transform(torch.zeros(1, 5, 5), TransformSpec(Protocol.JIGSAW, perm_index=1))

    @settings(max_examples=40, deadline=None)
    @given(data=st.data())
    def test_multiset_and_top_left(self, data):
        protocol = data.draw(st.sampled_from(list(Protocol)))
        spec, _ = data.draw(st.sampled_from(enumerate_transforms(protocol)))
        x = torch.from_numpy(np.random.default_rng(data.draw(st.integers(0, 999))).normal(size=(3, 8, 8)))
        out = apply_transform(x, spec)
        assert out.shape == x.shape
        assert torch.equal(out.flatten().sort().values, x.flatten().sort().values)
        if protocol.is_jigsaw:
            assert torch.equal(out[:, :4, :4], x[:, :4, :4])


class TestSampling:
    def test_deterministic(self):
        for protocol in Protocol:
            a = [sample_transform(protocol, np.random.default_rng(7)) for _ in range(3)]
            b = [sample_transform(protocol, np.random.default_rng(7)) for _ in range(3)]
            assert a == b

    def test_rotation_uniform(self):
        rng = np.random.default_rng(0)
        counts = np.bincount([sample_transform(Protocol.ROTATION, rng).rotation_k for _ in range(10_000)],
                             minlength=4)
        freq = counts / counts.sum()
        assert np.all(np.abs(freq - 0.25) < 0.02)
        assert chisquare(counts).pvalue > 1e-3

    def test_jigsaw_rotation_support(self):
        seen = {sample_transform(Protocol.JIGSAW_ROTATION, np.random.default_rng(s)) for s in range(5000)}
        assert len(seen) <= 384
        assert len(seen) > 350


class TestLabels:
    def test_rotation_normal_label(self):
        label = encode_label(TransformSpec(Protocol.ROTATION))
        assert label.bits == (1, 0, 0, 0)
        assert label.is_normal

    def test_rotation_one_hot(self):
        assert encode_label(TransformSpec(Protocol.ROTATION, rotation_k=2)).bits == (0, 0, 1, 0)

    def test_multi_hot_layout(self):
        spec = TransformSpec(Protocol.JIGSAW_ROTATION, perm_index=0, partition_rotations=(0, 1, 0))
        bits = encode_label(spec).bits
        # blocks [6 | 4 | 4 | 4] start at 0, 6, 10, 14
        offsets = np.cumsum([0, 6, 4, 4])
        expected = {offsets[0] + 0, offsets[1] + 0, offsets[2] + 1, offsets[3] + 0}
        assert set(np.nonzero(bits)[0]) == expected == {0, 6, 11, 14}
        assert not encode_label(spec).is_normal

    @pytest.mark.parametrize("protocol,count", [(Protocol.ROTATION, 4), (Protocol.JIGSAW, 6),
                                                (Protocol.JIGSAW_ROTATION, 384)])
    def test_enumeration_complete_and_injective(self, protocol, count):
        entries = enumerate_transforms(protocol)
        assert len(entries) == count
        assert entries[0][0].is_identity and entries[0][1] == normal_label(protocol)
        assert len({label.bits for _, label in entries}) == count
        for spec, label in entries:
            assert len(label.bits) == protocol.label_dim
            assert sum(label.bits) == len(protocol.blocks)
            assert label.is_normal == spec.is_identity
            assert decode_label(label.bits, protocol) == spec

    def test_subsample(self):
        entries = enumerate_transforms(Protocol.JIGSAW_ROTATION, subsample=18, seed=3)
        assert len(entries) == 24
        assert entries == enumerate_transforms(Protocol.JIGSAW_ROTATION, subsample=18, seed=3)
        assert entries[0][0].is_identity

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            TransformSpec(Protocol.ROTATION, perm_index=1)
        with pytest.raises(ValueError):
            TransformSpec(Protocol.JIGSAW, rotation_k=1)
