import numpy as np
import pytest

from glcoupling.mesh import (
    ConfigurationError,
    GridSpec,
    generate_patch_grid,
    interface_adjacency,
    structured_mesh,
    tag_inclusion,
)


def test_structured_mesh_counts_and_lexicographic_order():
    m = structured_mesh((0.0, 0.0, 0.0), (2, 3, 4), 0.5, 1e-9)
    assert m.n_nodes == 3 * 4 * 5
    assert m.n_elements == 2 * 3 * 4
    # x runs fastest
    np.testing.assert_allclose(m.nodes[1] - m.nodes[0], [0.5, 0, 0])
    np.testing.assert_allclose(m.nodes[3] - m.nodes[0], [0, 0.5, 0])
    np.testing.assert_allclose(m.element_volumes(), 0.125)


def test_local_node_bits():
    m = structured_mesh((0.0, 0.0), (1, 1), 1.0, 1e-9)
    x = m.nodes[m.elements[0]]
    for a in range(4):
        np.testing.assert_allclose(x[a], [a & 1, (a >> 1) & 1])


def test_lookup_tolerates_roundoff():
    m = structured_mesh((0.0, 0.0), (4, 4), 0.25, 0.25e-9)
    assert m.lookup((0.75 + 1e-13, 0.5 - 1e-13)) == 3 + 2 * 5


def test_full_grid_patch_counts():
    d = generate_patch_grid(GridSpec(2, 2, 2))
    assert d.n_patches == 8
    assert d.complement_elements.size == 0
    assert d.global_mesh.n_elements == 8 * 8
    for p in d.patches:
        assert p.mesh.n_elements == 8**3
        assert p.zone_elements.size == 8


def test_interfaces_exclude_outer_boundary_faces():
    d = generate_patch_grid(GridSpec(2, 1, 1))
    p = d.patches[0]
    x = p.mesh.nodes[p.interface.fine_iface_nodes]
    # the only interior face of cell 0 is x = 1
    np.testing.assert_allclose(x[:, 0], 1.0)
    assert len(p.interface.fine_iface_nodes) == 9 * 9


def test_shared_interface_nodes_are_adjacent_to_both():
    d = generate_patch_grid(GridSpec(2, 1, 1))
    adj = interface_adjacency(d)
    both = [n for n, (pats, _) in adj.items() if pats == frozenset({0, 1})]
    assert len(both) == 3 * 3


def test_partial_coverage_has_complement():
    d = generate_patch_grid(GridSpec(3, 3, 0, patched_cells=[4]))
    assert d.n_patches == 1
    assert d.complement_elements.size == 8 * 4
    adj = interface_adjacency(d)
    assert all(touch for _, touch in adj.values())


def test_two_dimensional_variant():
    d = generate_patch_grid(GridSpec(2, 2, 0))
    assert d.global_mesh.dim == 2
    assert d.patches[0].mesh.n_elements == 64


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(h_global=0.3),
        dict(h_fine=0.0),
        dict(h_fine=0.6),
        dict(patched_cells=[9]),
        dict(patch_side=-1.0),
    ],
)
def test_invalid_grids_rejected(kwargs):
    with pytest.raises(ConfigurationError):
        GridSpec(2, 2, 2, **kwargs)


def test_inclusion_volume_fraction():
    m = structured_mesh((0.0, 0.0, 0.0), (16, 16, 16), 1 / 16, 1e-11)
    mat = tag_inclusion(m, (0.5, 0.5, 0.5), 0.25, 1.0, 0.01)
    frac = (mat.values == 0.01).mean()
    assert abs(frac - 4 / 3 * np.pi * 0.25**3) < 0.01
    assert mat.contrast == pytest.approx(100.0)
