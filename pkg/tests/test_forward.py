import numpy as np
import pytest

from capradon.forward import (
    BoundingBoxError,
    SensorGeometry,
    SinogramFileError,
    SinogramSet,
    load_sinogram,
    pack_sinogram,
    project_slice,
    quantize,
    save_sinogram,
    simulate_sweep,
)
from capradon.greenfn import potential_coefficients
from capradon.phantom import (
    Box,
    Cylinder,
    PhantomSpec,
    Sphere,
    eval_permittivity,
    mirrored_x,
    translated,
)
from capradon.weights import condition_weight, synthesize_weight


@pytest.fixture(scope="module")
def coeffs():
    return potential_coefficients(order=8, eps0=0.1)


def make_weights(coeffs, gaps, dx=0.25, dz=0.25, z_max=2.0, x_pad=2.0,
                 z_cut=0.5):
    return {k: condition_weight(
        synthesize_weight(coeffs, k, x_pad=x_pad, z_max=z_max, dx=dx, dz=dz),
        z_cut=z_cut) for k in gaps}


@pytest.fixture(scope="module")
def small_weights(coeffs):
    return make_weights(coeffs, (1, 2))


@pytest.fixture(scope="module")
def geom():
    return SensorGeometry(n=6, pitch=2.5, n_angles=8, standoff=2.0,
                          gaps=(1, 2))


def test_geometry_properties():
    g = SensorGeometry(n=6, pitch=2.5, n_angles=8, standoff=2.0, gaps=(2, 1))
    assert g.electrode_count == 13
    assert g.scan_radius == 15.0
    assert g.gaps == (1, 2)
    assert g.detector_count(1) == 12
    offs = g.detector_offsets(1)
    assert offs.shape == (12,)
    assert offs[0] == -15.0 and offs[-1] == 12.5
    np.testing.assert_allclose(np.diff(offs), 2.5)
    ang = g.angles()
    assert ang.shape == (8,)
    assert ang[0] == 0.0
    assert ang[-1] == pytest.approx(7 * np.pi / 8)


def test_geometry_validation():
    with pytest.raises(ValueError):
        SensorGeometry(n=3)
    with pytest.raises(ValueError):
        SensorGeometry(n_angles=0)
    with pytest.raises(ValueError):
        SensorGeometry(pitch=0.0)
    with pytest.raises(ValueError):
        SensorGeometry(standoff=-1.0)
    with pytest.raises(ValueError):
        SensorGeometry(gaps=())
    with pytest.raises(ValueError):
        SensorGeometry(gaps=(1, 5))
    with pytest.raises(ValueError):
        SensorGeometry(quant_delta=-0.1)


def test_sinogram_set_validation(geom):
    good = {k: np.zeros((geom.n_angles, geom.detector_count(k)))
            for k in geom.gaps}
    with pytest.raises(ValueError):
        SinogramSet(geometry=geom, angles=geom.angles(), data={1: good[1]})
    bad_shape = dict(good)
    bad_shape[2] = np.zeros((geom.n_angles, 3))
    with pytest.raises(ValueError):
        SinogramSet(geometry=geom, angles=geom.angles(), data=bad_shape)
    bad_vals = {k: v.copy() for k, v in good.items()}
    bad_vals[1][0, 0] = np.nan
    with pytest.raises(ValueError):
        SinogramSet(geometry=geom, angles=geom.angles(), data=bad_vals)
    with pytest.raises(ValueError):
        SinogramSet(geometry=geom, angles=geom.angles(), data=good,
                    metadata={"a=b": "c"})


def test_slice_empty_phantom_is_zero():
    assert project_slice(PhantomSpec(()), 0.3, 1.0, 5.0, step=0.1) == 0.0


def test_slice_outside_support_is_zero():
    spec = PhantomSpec((Sphere(center=(0, 0, 5.0), radius=2.0, contrast=2.0),))
    assert project_slice(spec, 0.7, 5.0, 5.0, step=0.1) == 0.0


def test_slice_rejects_bad_step():
    spec = PhantomSpec((Sphere(center=(0, 0, 5.0), radius=2.0, contrast=2.0),))
    with pytest.raises(ValueError):
        project_slice(spec, 0.0, 0.0, 5.0, step=0.0)


def test_slice_scan_radius_check():
    spec = PhantomSpec((Sphere(center=(20.0, 0, 5.0), radius=2.0,
                               contrast=2.0),))
    with pytest.raises(BoundingBoxError):
        project_slice(spec, 0.0, 0.0, 5.0, step=0.1, scan_radius=15.0)


def test_slice_matches_cylinder_chord():
    # midpoint quadrature of an indicator is exact up to the two boundary
    # cells, so the error is bounded by 2*step*(contrast-1)
    spec = PhantomSpec((Cylinder(cx=0, cy=0, z_lo=0, z_hi=30, radius=7.0,
                                 contrast=2.0),))
    for step in (0.625, 0.2):
        for s in (0.0, 1.3, 3.7, 6.0, 6.9):
            for theta in (0.0, 0.4, 1.1, 2.2):
                got = project_slice(spec, theta, s, 5.0, step=step)
                want = 2.0 * np.sqrt(49.0 - s * s)
                assert abs(got - want) < 2 * step


def test_slice_error_shrinks_with_step():
    spec = PhantomSpec((Cylinder(cx=3.0, cy=-2.0, z_lo=0, z_hi=30, radius=4.0,
                                 contrast=1.8),))

    def worst(step):
        errs = []
        for theta in (0.3, 1.0, 2.5):
            sc = 3.0 * np.cos(theta) - 2.0 * np.sin(theta)
            for ds in (0.0, 1.5, 3.0):
                got = project_slice(spec, theta, sc + ds, 5.0, step=step)
                errs.append(abs(got - 1.6 * np.sqrt(16.0 - ds * ds)))
        return max(errs)

    assert worst(0.05) < worst(0.4)


def _brute_sweep(spec, grid, geom):
    """Scalar-loop reference for a single gap; same quadrature nodes."""
    b = spec.bounds()
    cx, cy = 0.5 * (b[0] + b[1]), 0.5 * (b[2] + b[3])
    rb = 0.5 * np.hypot(b[1] - b[0], b[3] - b[2])
    m = int(np.ceil(2 * rb / (geom.pitch / 4)))
    dt = 2 * rb / m
    nd = geom.detector_count(grid.gap)
    rows = np.zeros((geom.n_angles, nd))
    for j, th in enumerate(geom.angles()):
        tc = -cx * np.sin(th) + cy * np.cos(th)
        for i in range(nd):
            a = (i - geom.n) * geom.pitch
            acc = 0.0
            for jx in range(grid.nx):
                xmm = a + (grid.x_origin + jx * grid.dx) * geom.pitch
                for iz in range(grid.nz):
                    if grid.values[iz, jx] == 0.0:
                        continue
                    zmm = (geom.standoff
                           + (grid.z_origin + iz * grid.dz) * geom.pitch)
                    p = 0.0
                    for q in range(m):
                        t = (tc - rb) + (q + 0.5) * dt
                        x = xmm * np.cos(th) - t * np.sin(th)
                        y = xmm * np.sin(th) + t * np.cos(th)
                        p += eval_permittivity(spec, x, y, zmm) - 1.0
                    acc += grid.values[iz, jx] * p * dt
            rows[j, i] = acc * (grid.dx * geom.pitch) * (grid.dz * geom.pitch)
    return rows


def test_sweep_matches_scalar_reference(coeffs):
    geom = SensorGeometry(n=6, pitch=2.5, n_angles=2, standoff=2.0, gaps=(1,))
    w = make_weights(coeffs, (1,), z_max=1.0, x_pad=1.0)
    spec = PhantomSpec((
        Box(center=(2.1, -1.3, 6.0), half_extents=(3.1, 2.3, 2.7),
            angle_deg=20.0, contrast=2.0),
        Sphere(center=(-4.2, 3.3, 5.0), radius=2.2, contrast=1.5),
    ))
    sino = simulate_sweep(spec, w, geom)
    ref = _brute_sweep(spec, w[1], geom)
    np.testing.assert_allclose(sino.data[1], ref, rtol=0,
                               atol=1e-10 * np.abs(ref).max())


def test_sweep_homogeneous_is_zero(small_weights, geom):
    sino = simulate_sweep(PhantomSpec(()), small_weights, geom)
    for k in geom.gaps:
        np.testing.assert_array_equal(sino.data[k], 0.0)
    assert "phantom_sha256" in sino.metadata
    assert "weight_sha256_k1" in sino.metadata


def test_sweep_centered_cylinder_angle_invariant(small_weights, geom):
    spec = PhantomSpec((Cylinder(cx=0, cy=0, z_lo=3.0, z_hi=9.0, radius=6.3,
                                 contrast=2.0),))
    sino = simulate_sweep(spec, small_weights, geom)
    for k in geom.gaps:
        peak = np.abs(sino.data[k]).max()
        assert np.abs(sino.data[k] - sino.data[k][0]).max() < 1e-10 * peak


def test_sweep_linearity_in_contrast(small_weights, geom):
    base = Cylinder(cx=2.0, cy=1.0, z_lo=3.0, z_hi=9.0, radius=4.0,
                    contrast=1.5)
    s_half = simulate_sweep(PhantomSpec((base,)), small_weights, geom)
    s_full = simulate_sweep(
        PhantomSpec((Cylinder(cx=2.0, cy=1.0, z_lo=3.0, z_hi=9.0, radius=4.0,
                              contrast=2.0),)), small_weights, geom)
    for k in geom.gaps:
        np.testing.assert_array_equal(2.0 * s_half.data[k], s_full.data[k])


def test_sweep_translation_shifts_detectors(small_weights):
    geom1 = SensorGeometry(n=6, pitch=2.5, n_angles=1, standoff=2.0,
                           gaps=(1, 2))
    spec = PhantomSpec((Box(center=(0.37, 0.81, 6.0),
                            half_extents=(2.9, 2.3, 2.7), angle_deg=17.0,
                            contrast=2.0),))
    s_a = simulate_sweep(spec, small_weights, geom1)
    s_b = simulate_sweep(translated(spec, geom1.pitch, 0.0), small_weights,
                         geom1)
    for k in geom1.gaps:
        peak = np.abs(s_a.data[k]).max()
        np.testing.assert_allclose(s_b.data[k][0][1:], s_a.data[k][0][:-1],
                                   rtol=0, atol=1e-10 * peak)


def test_sweep_mirror_reverses_detectors(small_weights):
    geom1 = SensorGeometry(n=6, pitch=2.5, n_angles=1, standoff=2.0,
                           gaps=(1, 2))
    spec = PhantomSpec((Box(center=(0.37, 0.81, 6.0),
                            half_extents=(2.9, 2.3, 2.7), angle_deg=17.0,
                            contrast=2.0),))
    s_a = simulate_sweep(spec, small_weights, geom1)
    s_m = simulate_sweep(mirrored_x(spec), small_weights, geom1)
    for k in geom1.gaps:
        peak = np.abs(s_a.data[k]).max()
        np.testing.assert_allclose(s_m.data[k][0], s_a.data[k][0][::-1],
                                   rtol=0, atol=1e-10 * peak)


def test_sweep_sphere_peak_tracks_projection(small_weights):
    geom12 = SensorGeometry(n=6, pitch=2.5, n_angles=12, standoff=2.0,
                            gaps=(1, 2))
    spec = PhantomSpec((Sphere(center=(6.0, 2.0, 6.0), radius=2.5,
                               contrast=3.0),))
    sino = simulate_sweep(spec, small_weights, geom12)
    for k in geom12.gaps:
        # a pair at gap k is centered k*pitch/2 to the right of its left site
        for j, theta in enumerate(sino.angles):
            s_c = 6.0 * np.cos(theta) + 2.0 * np.sin(theta)
            want = (s_c - k * geom12.pitch / 2) / geom12.pitch + geom12.n
            got = np.argmax(np.abs(sino.data[k][j]))
            assert abs(got - want) < 2.0


def test_sweep_mass_conservation(small_weights, geom):
    inv = PhantomSpec((Cylinder(cx=0, cy=0, z_lo=3.0, z_hi=9.0, radius=6.3,
                                contrast=2.0),))
    s_inv = simulate_sweep(inv, small_weights, geom)
    for k in geom.gaps:
        tot = s_inv.data[k].sum(axis=1)
        assert (tot.max() - tot.min()) <= 1e-10 * abs(tot.mean())
    # off-center shapes see the fixed-step chord quadrature differently per
    # angle, so conservation is only as good as the step
    gen = PhantomSpec((
        Box(center=(2.1, -1.3, 6.0), half_extents=(3.1, 2.3, 2.7),
            angle_deg=20.0, contrast=2.0),
        Sphere(center=(-4.2, 3.3, 5.0), radius=2.2, contrast=1.5),
    ))
    s_gen = simulate_sweep(gen, small_weights, geom)
    for k in geom.gaps:
        tot = s_gen.data[k].sum(axis=1)
        assert (tot.max() - tot.min()) < 0.1 * abs(tot.mean())


def test_sweep_validation(coeffs, small_weights, geom):
    spec = PhantomSpec((Sphere(center=(0, 0, 5.0), radius=2.0, contrast=2.0),))
    raw = {k: synthesize_weight(coeffs, k, x_pad=2.0, z_max=2.0, dx=0.25,
                                dz=0.25) for k in geom.gaps}
    with pytest.raises(ValueError, match="conditioned"):
        simulate_sweep(spec, raw, geom)
    with pytest.raises(ValueError, match="gaps"):
        simulate_sweep(spec, {1: small_weights[1]}, geom)
    mixed = dict(small_weights)
    mixed[2] = make_weights(coeffs, (2,), dx=0.125)[2]
    with pytest.raises(ValueError, match="share"):
        simulate_sweep(spec, mixed, geom)
    coarse = make_weights(coeffs, geom.gaps, dx=0.3)
    with pytest.raises(ValueError, match="integer"):
        simulate_sweep(spec, coarse, geom)
    far = PhantomSpec((Sphere(center=(20.0, 0, 5.0), radius=2.0,
                              contrast=2.0),))
    with pytest.raises(BoundingBoxError):
        simulate_sweep(far, small_weights, geom)
    with pytest.raises(ValueError):
        simulate_sweep(spec, small_weights, geom, workers=0)


def test_sweep_worker_determinism(small_weights, geom):
    spec = PhantomSpec((
        Box(center=(2.1, -1.3, 6.0), half_extents=(3.1, 2.3, 2.7),
            angle_deg=20.0, contrast=2.0),
        Sphere(center=(-4.2, 3.3, 5.0), radius=2.2, contrast=1.5),
    ))
    s1 = simulate_sweep(spec, small_weights, geom, workers=1)
    s2 = simulate_sweep(spec, small_weights, geom, workers=2)
    for k in geom.gaps:
        np.testing.assert_array_equal(s1.data[k], s2.data[k])


def _example_sinogram(small_weights, geom, metadata=None):
    spec = PhantomSpec((Sphere(center=(3.0, -1.0, 6.0), radius=2.5,
                               contrast=2.0),))
    return simulate_sweep(spec, small_weights, geom, metadata=metadata)


def test_quantize_spot_values(geom):
    data = {k: np.zeros((geom.n_angles, geom.detector_count(k)))
            for k in geom.gaps}
    data[1][0, :7] = [0.5, -0.5, 0.09, 0.1, 0.0, 0.31, -0.29]
    sino = SinogramSet(geometry=geom, angles=geom.angles(), data=data)
    q = quantize(sino, 0.2)
    np.testing.assert_allclose(q.data[1][0, :7],
                               [0.6, -0.6, 0.0, 0.2, 0.0, 0.4, -0.2],
                               rtol=0, atol=1e-12)
    assert q.geometry.quant_delta == 0.2


def test_quantize_default_step_and_bound(small_weights, geom):
    sino = _example_sinogram(small_weights, geom)
    peak = max(np.abs(a).max() for a in sino.data.values())
    q = quantize(sino)
    assert q.geometry.quant_delta == pytest.approx(peak / 140.0)
    for k in geom.gaps:
        err = np.abs(q.data[k] - sino.data[k])
        assert err.max() <= q.geometry.quant_delta / 2 + 1e-12
        steps = q.data[k] / q.geometry.quant_delta
        np.testing.assert_allclose(steps, np.round(steps), rtol=0, atol=1e-9)


def test_quantize_zero_is_identity(small_weights, geom):
    sino = _example_sinogram(small_weights, geom)
    q = quantize(sino, 0.0)
    for k in geom.gaps:
        np.testing.assert_array_equal(q.data[k], sino.data[k])
    with pytest.raises(ValueError):
        quantize(sino, -1.0)


def test_sinogram_round_trip(tmp_path, small_weights, geom):
    sino = _example_sinogram(small_weights, geom,
                             metadata={"note": "k=v pairs survive"})
    path = tmp_path / "sweep.ects"
    save_sinogram(sino, path)
    back = load_sinogram(path)
    assert back.geometry == sino.geometry
    np.testing.assert_array_equal(back.angles, sino.angles)
    for k in geom.gaps:
        np.testing.assert_array_equal(
            back.data[k], sino.data[k].astype("<f4").astype(float))
    assert back.metadata == sino.metadata
    assert pack_sinogram(back) == path.read_bytes()


def test_quantized_sinogram_round_trip(tmp_path, small_weights, geom):
    q = quantize(_example_sinogram(small_weights, geom))
    path = tmp_path / "sweep_q.ects"
    save_sinogram(q, path)
    back = load_sinogram(path)
    assert back.geometry.quant_delta == pytest.approx(q.geometry.quant_delta)


def test_sinogram_load_rejects_garbage(tmp_path, small_weights, geom):
    sino = _example_sinogram(small_weights, geom)
    path = tmp_path / "sweep.ects"
    save_sinogram(sino, path)
    blob = path.read_bytes()

    bad = tmp_path / "bad.ects"
    bad.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(SinogramFileError, match="magic"):
        load_sinogram(bad)
    bad.write_bytes(blob[:4] + b"\x63\x00" + blob[6:])
    with pytest.raises(SinogramFileError, match="version"):
        load_sinogram(bad)
    bad.write_bytes(blob[:60])
    with pytest.raises(SinogramFileError):
        load_sinogram(bad)
