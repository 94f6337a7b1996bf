import json
import math

import numpy as np
import pytest

from semclip.imaging import GridSpec, grid_regions
from semclip.synthbench import (
    SHAPES,
    COUNT_QUESTION,
    ShapePlacement,
    SynthConfig,
    SynthGenerationError,
    SynthScene,
    generate,
    load_manifest,
    load_scenes,
    pixels_in_view,
    placement_bbox,
    render,
    scene_from_dict,
    scene_to_dict,
    shape_pixel_count,
    synth_config_from_dict,
    visible_after_resize,
    write_dataset,
)


def brute_force_count(shape: str, size: int) -> int:
    """Per-pixel scan with the predicates written out longhand."""
    count = 0
    s = size
    for y in range(s):
        for x in range(s):
            if shape == "square":
                inside = True
            elif shape == "circle":
                cx = (s - 1) / 2.0
                inside = (x - cx) ** 2 + (y - cx) ** 2 <= (s / 2.0) ** 2
            elif shape == "triangle":
                inside = abs(2 * x - (s - 1)) <= y
            elif shape == "star":
                b = max(1, (3 * (s - 1)) // 4)
                up = abs(2 * x - (s - 1)) * b <= (s - 1) * y and y <= b
                down = abs(2 * x - (s - 1)) * b <= (s - 1) * (s - 1 - y) and y >= (s - 1) - b
                inside = up or down
            count += inside
    return count


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("size", [3, 8, 11, 24, 37])
def test_shape_mask_matches_brute_force(shape, size):
    assert shape_pixel_count(shape, size) == brute_force_count(shape, size)


def test_square_count_is_area():
    assert shape_pixel_count("square", 10) == 100


def test_render_empty_scene_is_background():
    scene = SynthScene(canvas=(60, 48), grid_n=2, placements=(), background=(10, 20, 30))
    arr = render(scene).to_array()
    assert np.all(arr == (10, 20, 30))


def test_render_square_changes_exactly_its_area():
    scene = SynthScene(
        canvas=(90, 90),
        grid_n=3,
        placements=(ShapePlacement(cell=0, shape="square", color="red", size=10),),
    )
    arr = render(scene).to_array()
    changed = np.any(arr != scene.background, axis=2).sum()
    assert changed == 100


def test_render_circle_matches_scan():
    scene = SynthScene(
        canvas=(90, 90),
        grid_n=3,
        placements=(ShapePlacement(cell=4, shape="circle", color="blue", size=21),),
    )
    arr = render(scene).to_array()
    changed = int(np.any(arr != scene.background, axis=2).sum())
    assert changed == brute_force_count("circle", 21)


def test_placement_centered_inside_cell():
    scene = SynthScene(canvas=(90, 90), grid_n=3)
    pl = ShapePlacement(cell=5, shape="square", color="red", size=12)
    bbox = placement_bbox(scene, pl)
    cell = grid_regions(90, 90, GridSpec(3))[5].bbox
    assert cell[0] <= bbox[0] and bbox[2] <= cell[2]
    assert cell[1] <= bbox[1] and bbox[3] <= cell[3]


def test_pixels_in_view_partial_overlap():
    scene = SynthScene(canvas=(90, 90), grid_n=3)
    pl = ShapePlacement(cell=0, shape="square", color="red", size=10)
    x0, y0, x1, y1 = placement_bbox(scene, pl)
    # view covering the left half of the square
    half = pixels_in_view(scene, pl, (0, 0, x0 + 5, 90))
    assert half == 50
    assert pixels_in_view(scene, pl, (x1, y1, 90, 90)) == 0
    assert pixels_in_view(scene, pl, (0, 0, 90, 90)) == 100


def test_visible_after_resize_exact_integer_rule():
    # 9 px in a 90x90 view squeezed to 224^2: 9*224^2 = 451584 < 64*8100 = 518400
    assert not visible_after_resize(9, 90, 90, 224, 64)
    assert visible_after_resize(11, 90, 90, 224, 64)
    # same 9 px in a 30x30 crop: 451584 >= 64*900 = 57600
    assert visible_after_resize(9, 30, 30, 224, 64)


def test_generate_empty():
    assert generate(SynthConfig(count=0)) == []


def test_generate_deterministic_byte_identical():
    cfg = SynthConfig(count=4, seed=99, fraction_overview_solvable=0.5)
    a = generate(cfg)
    b = generate(cfg)
    assert [i.instance_id for i in a] == [i.instance_id for i in b]
    for x, y in zip(a, b):
        assert x.scene == y.scene
        assert x.image.pixels == y.image.pixels
        assert (x.question, x.answer, x.gt_cell) == (y.question, y.answer, y.gt_cell)


def test_generate_overview_solvable_fraction_exact():
    cfg = SynthConfig(count=10, seed=5, fraction_overview_solvable=0.25)
    insts = generate(cfg)
    w, h = cfg.canvas
    solvable = 0
    for inst in insts:
        target = inst.scene.placements[inst.scene.target_index]
        count = shape_pixel_count(target.shape, target.size)
        solvable += visible_after_resize(count, w, h, cfg.oracle_resolution, cfg.min_visible_pixels)
    assert solvable == math.floor(0.25 * 10) == 2


def test_generate_targets_always_crop_readable():
    cfg = SynthConfig(count=8, seed=6)
    regions = grid_regions(*cfg.canvas, GridSpec(cfg.grid_n))
    for inst in generate(cfg):
        target = inst.scene.placements[inst.scene.target_index]
        x0, y0, x1, y1 = regions[target.cell].bbox
        count = shape_pixel_count(target.shape, target.size)
        assert visible_after_resize(count, x1 - x0, y1 - y0, cfg.oracle_resolution, cfg.min_visible_pixels)


def test_generate_unique_cells_and_descriptors():
    insts = generate(SynthConfig(count=12, seed=8, distractor_count_range=(2, 5)))
    for inst in insts:
        cells = [p.cell for p in inst.scene.placements]
        assert len(cells) == len(set(cells))
        target = inst.scene.placements[inst.scene.target_index]
        distractors = [p for i, p in enumerate(inst.scene.placements) if i != inst.scene.target_index]
        if "color is the" in inst.question:
            assert all(d.shape != target.shape for d in distractors)
        else:
            assert all(d.color != target.color for d in distractors)


def test_generate_gt_cell_contains_whole_target():
    cfg = SynthConfig(count=6, seed=9)
    regions = grid_regions(*cfg.canvas, GridSpec(cfg.grid_n))
    for inst in generate(cfg):
        target = inst.scene.placements[inst.scene.target_index]
        assert target.cell == inst.gt_cell
        bbox = placement_bbox(inst.scene, target)
        cell = regions[inst.gt_cell].bbox
        assert cell[0] <= bbox[0] and bbox[2] <= cell[2] and cell[1] <= bbox[1] and bbox[3] <= cell[3]
        for other in range(9):
            if other != inst.gt_cell:
                assert pixels_in_view(inst.scene, target, regions[other].bbox) == 0


def test_generate_count_template():
    cfg = SynthConfig(count=5, seed=10, templates=("count",))
    for inst in generate(cfg):
        assert inst.question == COUNT_QUESTION
        assert inst.answer == str(len(inst.scene.placements))


def test_generate_rejects_too_many_distractors():
    with pytest.raises(SynthGenerationError):
        SynthConfig(count=1, distractor_count_range=(9, 12)).validate()


def test_generate_rejects_unsatisfiable_sizes():
    # overview-solvable targets need >= 2304 px, impossible below size 48
    cfg = SynthConfig(count=2, seed=1, size_range=(24, 30), fraction_overview_solvable=1.0)
    with pytest.raises(SynthGenerationError):
        generate(cfg)


def test_synth_config_from_dict_rejects_unknown():
    with pytest.raises(SynthGenerationError):
        synth_config_from_dict({"count": 1, "bogus": 2})
    cfg = synth_config_from_dict({"count": 3, "size_range": [30, 40], "templates": ["count"]})
    assert cfg.size_range == (30, 40)


def test_scene_dict_round_trip():
    scene = generate(SynthConfig(count=1, seed=2))[0].scene
    assert scene_from_dict(json.loads(json.dumps(scene_to_dict("x", scene)))) == scene


def test_write_and_load_dataset(tmp_path):
    # at 180x180 every in-range target clears the overview threshold
    insts = generate(
        SynthConfig(count=3, seed=3, canvas=(180, 180), size_range=(10, 40), fraction_overview_solvable=1.0)
    )
    manifest, scenes_path = write_dataset(insts, str(tmp_path))
    rows = load_manifest(manifest)
    assert [r.instance_id for r in rows] == [i.instance_id for i in insts]
    for row, inst in zip(rows, insts):
        assert row.question == inst.question
        assert row.answer == inst.answer
        assert row.gt_cell == inst.gt_cell
        assert row.image.pixels == inst.image.pixels
    scenes = load_scenes(scenes_path)
    assert scenes[insts[0].instance_id] == insts[0].scene


def test_load_manifest_rejects_missing_keys(tmp_path):
    path = tmp_path / "manifest.jsonl"
    path.write_text('{"instance_id": "a"}\n')
    with pytest.raises(ValueError):
        load_manifest(str(path))


def test_manifest_ingests_rows_without_gt_cell(tmp_path):
    path = tmp_path / "manifest.jsonl"
    row = {"instance_id": "a", "image_path": "img.png", "question": "q?", "answer": "x", "grid_n": 3}
    path.write_text(json.dumps(row) + "\n")
    loaded = load_manifest(str(path))[0]
    assert loaded.gt_cell is None
    assert loaded.options is None
