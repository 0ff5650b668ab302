import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridsr import fields as F
from gridsr import prng
from gridsr.errors import FormatError, ShapeError


class TestVariableSet:
    def test_exactly_4_surface_and_15_upper(self):
        assert len(F.ALL_VARS) == 19
        assert len(F.SURFACE_VARS) == 4
        assert sum(1 for v in F.ALL_VARS if not v.is_surface) == 15

    def test_canonical_units(self):
        assert F.VariableId.T2M.units == "K"
        assert F.VariableId.Z100.units == "m2/s2"
        assert F.VariableId.Q50.units == "kg/kg"


class TestPrng:
    def test_deterministic(self):
        np.testing.assert_array_equal(prng.uniforms(42, 100), prng.uniforms(42, 100))

    def test_counter_based_offsets(self):
        # value at position k is independent of how the stream is chunked
        whole = prng.raw(7, 10)
        np.testing.assert_array_equal(whole[4:], prng.raw(7, 6, start=4))

    def test_frozen_reference_values(self):
        # pinned splitmix64 outputs; guards the documented state transitions
        got = [int(v) for v in prng.raw(0, 3)]
        assert got == [16294208416658607535, 7960286522194355700, 487617019471545679]

    def test_uniform_range(self):
        u = prng.uniforms(123, 10_000)
        assert u.min() >= 0.0 and u.max() < 1.0

    def test_normals_moments(self):
        z = prng.normals(9, 100_000)
        assert abs(z.mean()) < 0.02
        assert abs(z.std() - 1.0) < 0.02

    def test_shuffle_is_permutation(self):
        idx = prng.shuffled_indices(5, 100)
        assert sorted(idx.tolist()) == list(range(100))
        assert not np.array_equal(idx, np.arange(100))


class TestCoarsen:
    def test_block_mean(self):
        f = F.GridField(F.VariableId.T2M, [[1.0, 2.0], [3.0, 4.0]], 0.5)
        out = F.coarsen(f, 2)
        np.testing.assert_array_equal(out.values, [[2.5]])
        assert out.spacing_km == 1.0

    def test_constant_field(self):
        f = F.GridField(F.VariableId.T2M, np.full((8, 8), 3.25), 0.5)
        np.testing.assert_array_equal(F.coarsen(f, 4).values, np.full((2, 2), 3.25))

    @given(st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_mean_preserving(self, seed):
        rng = np.random.default_rng(seed)
        vals = rng.normal(size=(16, 16)) * 10
        f = F.GridField(F.VariableId.U10, vals, 0.5)
        assert abs(F.coarsen(f, 2).values.mean() - vals.mean()) < 1e-12

    @given(st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_associativity(self, seed):
        rng = np.random.default_rng(seed)
        f = F.GridField(F.VariableId.U10, rng.normal(size=(16, 16)), 0.5)
        two_steps = F.coarsen(F.coarsen(f, 2), 2).values
        one_step = F.coarsen(f, 4).values
        np.testing.assert_allclose(two_steps, one_step, rtol=0, atol=1e-13)

    def test_divisibility_error(self):
        f = F.GridField(F.VariableId.U10, np.ones((6, 6)), 0.5)
        with pytest.raises(ShapeError, match="6x6"):
            F.coarsen(f, 4)


class TestSynth:
    def test_zero_std_gives_constant(self):
        g = F.synth_grf(F.VariableId.T2M, 8, 8, 4, 280.0, 0.0, seed=1)
        np.testing.assert_array_equal(g.values, np.full((8, 8), 280.0))

    def test_same_seed_bit_identical(self):
        a = F.synth_grf(F.VariableId.U10, 32, 32, 5, 0.0, 3.0, seed=77)
        b = F.synth_grf(F.VariableId.U10, 32, 32, 5, 0.0, 3.0, seed=77)
        np.testing.assert_array_equal(a.values, b.values)

    def test_moments_on_128(self):
        g = F.synth_grf(F.VariableId.T2M, 128, 128, 6, 288.0, 5.0, seed=3)
        assert abs(g.values.mean() - 288.0) <= 0.05 * 5.0
        assert abs(g.values.std() - 5.0) <= 0.1 * 5.0

    def test_stack_has_19_channels(self):
        s = F.synth_stack(32, 32, seed=5)
        assert len(s.fields) == 19
        assert s.vars == F.ALL_VARS

    def test_t2m_mean_in_physical_range(self):
        s = F.synth_stack(64, 64, seed=11)
        t2m = s.to_array((F.VariableId.T2M,))[0]
        assert 278.0 <= t2m.mean() <= 298.0

    def test_different_seeds_differ_in_every_channel(self):
        a = F.synth_stack(32, 32, seed=1)
        b = F.synth_stack(32, 32, seed=2)
        for fa, fb in zip(a.fields, b.fields):
            assert not np.array_equal(fa.values, fb.values), fa.var.name

    def test_pr_nonnegative_with_zero_structure(self):
        s = F.synth_stack(64, 64, seed=13)
        pr = s.to_array((F.VariableId.PR,))[0]
        assert pr.min() >= 0.0
        assert (pr == 0.0).mean() >= 0.40

    def test_pr_negative_rejected_by_gridfield(self):
        with pytest.raises(ValueError, match="negative"):
            F.GridField(F.VariableId.PR, np.array([[1.0, -0.1], [0.0, 2.0]]), 0.5)


class TestNormalization:
    def _stacks(self, n=3, seed=0):
        return [F.synth_stack(16, 16, seed=seed + i) for i in range(n)]

    def test_zero_variance_named(self):
        flat = F.FieldStack(
            [F.GridField(v, np.full((4, 4), float(v.value)), 0.5) for v in F.ALL_VARS]
        )
        with pytest.raises(ValueError, match="U10"):
            F.fit_norm([flat])

    def test_round_trip_identity(self):
        stacks = self._stacks()
        stats = F.fit_norm(stacks)
        back = F.invert_norm(F.apply_norm(stacks[0], stats), stats)
        for orig, rec in zip(stacks[0].fields, back.fields):
            np.testing.assert_allclose(rec.values, orig.values, rtol=0, atol=1e-10)

    def test_post_normalization_pooled_mean(self):
        stacks = self._stacks(4)
        stats = F.fit_norm(stacks)
        normed = [F.apply_norm(s, stats).to_array() for s in stacks]
        pooled = np.concatenate([a.reshape(19, -1) for a in normed], axis=1)
        assert np.all(np.abs(pooled.mean(axis=1)) < 1e-9)
        np.testing.assert_allclose(pooled.std(axis=1), np.ones(19), atol=1e-9)


class TestGridIO:
    def test_round_trip_bit_identity(self, tmp_path):
        s = F.synth_stack(16, 16, seed=21, spacing_km=1.5)
        p = tmp_path / "x.grd"
        F.save_grid(p, s)
        back = F.load_grid(p)
        assert back.vars == s.vars
        assert back.spacing_km == s.spacing_km
        for a, b in zip(s.fields, back.fields):
            np.testing.assert_array_equal(a.values, b.values)
            assert a.units == b.units

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.grd"
        p.write_bytes(b"NOPE" + bytes(100))
        with pytest.raises(FormatError, match="bad magic"):
            F.load_grid(p)

    def test_version_mismatch(self, tmp_path):
        s = F.synth_stack(8, 8, seed=1)
        p = tmp_path / "x.grd"
        F.save_grid(p, s)
        blob = bytearray(p.read_bytes())
        blob[4] = 99
        p.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            F.load_grid(p)

    def test_truncated_payload(self, tmp_path):
        s = F.synth_stack(8, 8, seed=1)
        p = tmp_path / "x.grd"
        F.save_grid(p, s)
        blob = p.read_bytes()
        p.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError, match="truncated"):
            F.load_grid(p)

    def test_declared_dims_exceeding_payload(self, tmp_path):
        s = F.FieldStack([F.GridField(F.VariableId.U10, np.ones((4, 4)), 0.5)])
        p = tmp_path / "x.grd"
        F.save_grid(p, s)
        blob = bytearray(p.read_bytes())
        # channel header starts at byte 8: id(2) ny(4) nx(4); inflate ny
        blob[10:14] = (1 << 20).to_bytes(4, "little")
        p.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="truncated payload|dimension overflow"):
            F.load_grid(p)
