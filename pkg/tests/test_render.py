import numpy as np
import pytest

from downscale_lab.render import (
    DIVERGING,
    SEQUENTIAL,
    ColorMap,
    RenderError,
    decode_ppm,
    panel_filename,
    render_heatmap,
    render_panel,
    symmetric_range,
)


def pixels(payload):
    return decode_ppm(payload)


def test_constant_at_lo_is_first_color():
    img = pixels(render_heatmap(np.full((1, 1, 3, 5), 2.0), (2.0, 7.0)))
    assert img.shape == (3, 5, 3)
    assert np.all(img == SEQUENTIAL.colors[0])


def test_endpoints():
    img = pixels(render_heatmap(np.array([[0.0, 1.0]]), (0.0, 1.0)))
    assert tuple(img[0, 0]) == SEQUENTIAL.colors[0]
    assert tuple(img[0, 1]) == SEQUENTIAL.colors[-1]


def test_midpoint_blend_by_hand():
    # halfway between the first two control points: (68+59)/2, (1+82)/2, (84+139)/2, rounded half up
    img = pixels(render_heatmap(np.array([[0.125]]), (0.0, 1.0)))
    assert tuple(img[0, 0]) == (64, 42, 112)
    two = ColorMap("bw", (0.0, 1.0), ((0, 0, 0), (200, 100, 10)))
    img = pixels(render_heatmap(np.array([[0.25]]), (0.0, 1.0), two))
    assert tuple(img[0, 0]) == (50, 25, 3)


def test_clamps_out_of_range():
    img = pixels(render_heatmap(np.array([[-5.0, 99.0]]), (0.0, 1.0)))
    assert tuple(img[0, 0]) == SEQUENTIAL.colors[0] and tuple(img[0, 1]) == SEQUENTIAL.colors[-1]


def test_header_and_size():
    raw = render_heatmap(np.zeros((4, 6)), (0.0, 1.0))
    header = b"P6\n6 4\n255\n"
    assert raw.startswith(header) and len(raw) == len(header) + 4 * 6 * 3


def test_errors(tmp_path):
    with pytest.raises(RenderError):
        render_heatmap(np.zeros((2, 2)), (1.0, 1.0))
    with pytest.raises(RenderError):
        render_heatmap(np.zeros((2, 2)), (0.0, 1.0), path=tmp_path / "missing" / "x.ppm")
    with pytest.raises(RenderError):
        ColorMap("bad", (0.0, 0.6, 0.5, 1.0), ((0, 0, 0),) * 4)
    with pytest.raises(RenderError):
        render_panel([("a", np.zeros((2, 2))), ("b", np.zeros((2, 3)))], (0.0, 1.0))


def test_pure(tmp_path, rng):
    f = rng.standard_normal((8, 8))
    render_heatmap(f, (-2.0, 2.0), path=tmp_path / "a.ppm")
    render_heatmap(f, (-2.0, 2.0), path=tmp_path / "b.ppm")
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()


def test_single_panel_equals_heatmap(rng):
    f = rng.standard_normal((5, 7))
    assert render_panel([("only", f)], (-1.0, 1.0)) == render_heatmap(f, (-1.0, 1.0))


@pytest.mark.parametrize("k", [2, 3, 8])
def test_panel_width(k):
    img = pixels(render_panel([(str(i), np.zeros((4, 5))) for i in range(k)], (0.0, 1.0)))
    assert img.shape == (4, 5 * k + 2 * (k - 1), 3)


def test_panel_order_probe():
    levels = [0.0, 0.5, 1.0]
    img = pixels(render_panel([(str(v), np.full((3, 3), v)) for v in levels], (0.0, 1.0)))
    assert tuple(img[1, 1]) == SEQUENTIAL.colors[0]
    assert tuple(img[1, 3]) == (255, 255, 255)
    assert tuple(img[1, 6]) == SEQUENTIAL.colors[2]
    assert tuple(img[1, 11]) == SEQUENTIAL.colors[-1]


def test_symmetric_difference_range():
    diff = np.array([[-1.0, 3.0], [0.0, 2.0]])
    lo, hi = symmetric_range(diff)
    assert (lo, hi) == (-3.0, 3.0)
    img = pixels(render_heatmap(diff, (lo, hi), DIVERGING))
    assert tuple(img[1, 0]) == DIVERGING.colors[1]
    assert symmetric_range(np.zeros((2, 2))) == (-1.0, 1.0)


def test_filename():
    assert panel_filename("precipitation_like", "L2+NL2.2", "truth") == "precipitation_like_L2_NL22_truth.ppm"
