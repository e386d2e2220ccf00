import json

import numpy as np
import pytest

from panelcap.datagen import (GLYPH_KEYWORDS, GLYPH_LEVEL, GLYPHS, HARD_TEMPLATES, IMAGE_SIZE, LABEL_LEVEL,
                              LABEL_OFFSET, TEMPLATES, SyntheticFigureSpec, caption_vocabulary, format_stats,
                              generate_figure, in_memory_split, label_mask, load_split, make_dataset,
                              panel_rects, random_spec, read_jsonl)


def test_single_panel_figure():
    rec = generate_figure(SyntheticFigureSpec(1, 1, (("bars", 0),), seed=3))
    assert [p["label"] for p in rec.panels] == ["A"]
    x0, y0, x1, y1 = rec.panels[0]["bbox_xyxy"]
    assert x0 < 0.05 and y0 < 0.05 and x1 > 0.95 and y1 > 0.95
    assert rec.image.shape == (IMAGE_SIZE, IMAGE_SIZE) and rec.image.dtype == np.uint8


def test_same_seed_is_bitwise_identical():
    spec = SyntheticFigureSpec(2, 3, (("scatter", 1), ("curve", 0), ("heatgrid", 1)), seed=11)
    a, b = generate_figure(spec), generate_figure(spec)
    assert a.image.tobytes() == b.image.tobytes() and a.panels == b.panels


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticFigureSpec(2, 2, tuple(("bars", 0) for _ in range(5)))
    with pytest.raises(ValueError):
        SyntheticFigureSpec(3, 3, tuple(("bars", 0) for _ in range(9)))  # more than 8 panels
    with pytest.raises(ValueError):
        SyntheticFigureSpec(2, 2, (("pie", 0),))
    with pytest.raises(ValueError):
        SyntheticFigureSpec(2, 2, ())


def test_geometry_over_many_random_specs():
    rng = np.random.default_rng(0)
    for i in range(1000):
        spec = random_spec(rng, hard=bool(i % 2))
        rects = panel_rects(spec)
        labels = spec.labels
        assert labels == sorted(set(labels)) and labels[0] == "A"
        for k, (x0, y0, x1, y1) in enumerate(rects):
            lx0, ly0, lx1, ly1 = _label_bbox_for(labels[k])
            dx, dy = LABEL_OFFSET
            assert x0 <= x0 + dx + lx0 and x0 + dx + lx1 < x1
            assert y0 <= y0 + dy + ly0 and y0 + dy + ly1 < y1
            for (a0, b0, a1, b1) in rects[k + 1:]:
                assert a0 >= x1 or a1 <= x0 or b0 >= y1 or b1 <= y0  # disjoint


def _label_bbox_for(letter):
    ys, xs = np.nonzero(label_mask(letter))
    return xs.min(), ys.min(), xs.max(), ys.max()


def test_content_inside_boxes_and_label_stamped():
    rng = np.random.default_rng(1)
    for _ in range(50):
        spec = random_spec(rng)
        rec = generate_figure(spec)
        inside = np.zeros_like(rec.image, dtype=bool)
        for p in rec.panels:
            x0, y0, x1, y1 = (int(round(v * IMAGE_SIZE)) for v in p["bbox_xyxy"])
            inside[y0:y1, x0:x1] = True
            patch = rec.image[y0:y1, x0:x1]
            m = label_mask(p["label"])
            dx, dy = LABEL_OFFSET
            assert np.all(patch[dy:dy + m.shape[0], dx:dx + m.shape[1]][m] == LABEL_LEVEL)
        assert np.all(rec.image[~inside] == 0)


def test_caption_mentions_the_glyph():
    rng = np.random.default_rng(2)
    for _ in range(100):
        spec = random_spec(rng)
        rec = generate_figure(spec)
        for (glyph, _), p in zip(spec.glyphs, rec.panels):
            words = set(p["caption"].split())
            assert words & set(GLYPH_KEYWORDS[glyph])
            assert len(p["caption"].split()) >= 5
            x0, y0, x1, y1 = (int(round(v * IMAGE_SIZE)) for v in p["bbox_xyxy"])
            assert (rec.image[y0:y1, x0:x1] == GLYPH_LEVEL[glyph]).any()


def test_templates_are_six_to_ten_tokens_and_in_vocab():
    vocab = set(caption_vocabulary())
    for t in list(TEMPLATES.values()) + list(HARD_TEMPLATES.values()):
        assert 6 <= len(t.split()) <= 10
        assert set(t.split()) <= vocab
    assert set(GLYPHS) == {"bars", "scatter", "heatgrid", "curve"}


def test_hard_variant_adds_distractors_and_synonyms():
    spec = SyntheticFigureSpec(2, 2, (("bars", 0), ("curve", 1)), seed=5, hard=True)
    rec = generate_figure(spec)
    easy = generate_figure(SyntheticFigureSpec(2, 2, (("bars", 0), ("curve", 1)), seed=5))
    assert rec.panels[0]["caption"] != easy.panels[0]["caption"]
    assert set(np.unique(rec.image)) - set(np.unique(easy.image))


def test_make_dataset_counts_and_reproducibility(tmp_path):
    stats = make_dataset(tmp_path / "a", 8, 1, 1, seed=7)
    assert {k: v["figures"] for k, v in stats.items()} == {"train": 8, "val": 1, "test": 1}
    ids = []
    for split in ("train", "val", "test"):
        rows, bad = read_jsonl(tmp_path / "a" / f"{split}.jsonl")
        assert bad == 0 and len(rows) == stats[split]["figures"]
        assert stats[split]["pairs"] == sum(len(r["panels"]) for r in rows)
        assert all(r["v"] == 1 for r in rows)
        ids += [r["figure_id"] for r in rows]
    assert len(ids) == len(set(ids))
    make_dataset(tmp_path / "b", 8, 1, 1, seed=7)
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "stats.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    saved = json.loads((tmp_path / "a" / "stats.json").read_text())
    assert saved["splits"] == stats
    assert "Train" in format_stats(stats)


def test_load_split_matches_in_memory(tmp_path, monkeypatch):
    monkeypatch.setenv("PANELCAP_CACHE", str(tmp_path / "cache"))
    make_dataset(tmp_path, 5, 0, 3, seed=9)
    for split, n in (("train", 5), ("test", 3)):
        disk = load_split(tmp_path / f"{split}.jsonl")
        mem = in_memory_split(n, 9, split=split)
        assert [r.figure_id for r in disk] == [r.figure_id for r in mem]
        for a, b in zip(disk, mem):
            assert np.array_equal(a.image, b.image) and a.panels == b.panels
    cached = load_split(tmp_path / "test.jsonl")  # second read comes from the cache
    assert all(np.array_equal(a.image, b.image) for a, b in zip(cached, disk))
    assert list((tmp_path / "cache").glob("*.npy"))


def test_read_jsonl_skips_malformed(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text('{"a": 1}\nnot json\n\n{"b": 2}\n')
    rows, bad = read_jsonl(p)
    assert rows == [{"a": 1}, {"b": 2}] and bad == 1


def test_negative_sizes_rejected(tmp_path):
    with pytest.raises(ValueError):
        make_dataset(tmp_path, -1, 0, 0)
