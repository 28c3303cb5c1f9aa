import numpy as np
import pytest

from protohead import (
    BBox,
    ClsNetWeights,
    Detection,
    FeatureMap,
    IntegralParams,
    LocNetWeights,
    PipelineConfig,
    PrototypeBank,
    ValidationError,
    detect,
    filter_small,
    load_detections,
    load_proposals,
    nms_class_agnostic,
    nms_per_class,
    save_detections,
)

from conftest import similarity_logit_oracle


def _det(x0, y0, x1, y1, score, cid=0, idx=-1):
    return Detection(BBox.from_corners(x0, y0, x1, y1), cid, f"c{cid}", score, idx)


def _random_detections(rng, n):
    out = []
    for _ in range(n):
        x0, y0 = rng.uniform(0, 200, 2)
        w, h = rng.uniform(5, 80, 2)
        out.append(
            _det(x0, y0, x0 + w, y0 + h, float(rng.uniform(0.01, 1.0)), int(rng.integers(4)))
        )
    return out


class TestNms:
    def test_singleton(self):
        d = [_det(0, 0, 10, 10, 0.5)]
        assert nms_class_agnostic(d, 0.5) == d

    def test_identical_boxes_keep_best(self):
        a = _det(0, 0, 10, 10, 0.9)
        b = _det(0, 0, 10, 10, 0.8, cid=1)
        assert nms_class_agnostic([b, a], 0.5) == [a]

    def test_disjoint_boxes_survive(self):
        a = _det(0, 0, 10, 10, 0.2)
        b = _det(50, 50, 70, 70, 0.9)
        assert nms_class_agnostic([a, b], 0.5) == [b, a]

    def test_tie_broken_by_input_order(self):
        a = _det(0, 0, 10, 10, 0.5)
        b = _det(1, 1, 11, 11, 0.5)
        assert nms_class_agnostic([a, b], 0.3) == [a]
        assert nms_class_agnostic([b, a], 0.3) == [b]

    def test_random_properties(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            dets = _random_detections(rng, int(rng.integers(0, 25)))
            out = nms_class_agnostic(dets, 0.5)
            again = nms_class_agnostic(out, 0.5)
            assert again == out  # idempotent
            assert all(d in dets for d in out)  # subset
            scores = [d.score for d in out]
            assert scores == sorted(scores, reverse=True)  # monotone
            for i, d in enumerate(out):  # pairwise suppressed
                for other in out[i + 1 :]:
                    assert d.box.iou(other.box) <= 0.5

    def test_per_class_keeps_cross_class_overlap(self):
        a = _det(0, 0, 10, 10, 0.9, cid=0)
        b = _det(0, 0, 10, 10, 0.8, cid=1)
        assert nms_per_class([a, b], 0.5) == [a, b]
        assert nms_class_agnostic([a, b], 0.5) == [a]

    def test_bad_threshold(self):
        with pytest.raises(ValidationError):
            nms_class_agnostic([], 1.0)

    def test_matches_reference_loop_at_scale(self):
        def reference(dets, thr):
            order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
            kept = []
            for i in order:
                if all(dets[i].box.iou(dets[j].box) <= thr for j in kept):
                    kept.append(i)
            return [dets[i] for i in kept]

        rng = np.random.default_rng(21)
        for _ in range(5):
            dets = _random_detections(rng, 300)
            for thr in (0.3, 0.5, 0.7):
                assert nms_class_agnostic(dets, thr) == reference(dets, thr)


class TestFilterSmall:
    def test_zero_threshold_identity(self):
        dets = [_det(0, 0, 3, 3, 0.5), _det(0, 0, 1, 1, 0.4)]
        assert filter_small(dets, 0.0) == dets

    def test_small_box_dropped(self):
        dets = [_det(0, 0, 2, 2, 0.5)]
        assert filter_small(dets, 5.0) == []

    def test_all_large_identity(self):
        dets = [_det(0, 0, 30, 30, 0.5), _det(5, 5, 40, 41, 0.9)]
        assert filter_small(dets, 100.0) == dets


class TestDetect:
    def _single_class_setup(self):
        data = np.zeros((6, 6, 3), dtype=np.float32)
        data[:, :, 0] = 1.0
        fm = FeatureMap(data, 96, 96, 16)
        bank = PrototypeBank(np.eye(1, 3, dtype=np.float32), ("thing",),
                             np.eye(3, dtype=np.float32)[1:2], normalized=True)
        cls_w = ClsNetWeights.zeros(in_channels=1 + 4 + 1, block_count=1, width=3)
        loc_w = LocNetWeights.zeros(in_channels=2 + 1, block_count=1, width=3)
        return fm, bank, cls_w, loc_w

    def test_zero_network_threshold_boundary(self):
        fm, bank, cls_w, loc_w = self._single_class_setup()
        proposals = [BBox(48, 48, 40, 40)]
        base = dict(k=1, t=4, grid=8, min_box_area=0.0)
        with pytest.warns(UserWarning):  # single-class rearrange warns
            kept = detect(fm, proposals, bank, PipelineConfig(score_threshold=0.5, **base),
                          cls_w, loc_w)
        assert len(kept) == 1 and kept[0].score == pytest.approx(0.5)
        with pytest.warns(UserWarning):
            dropped = detect(fm, proposals, bank, PipelineConfig(score_threshold=0.6, **base),
                             cls_w, loc_w)
        assert dropped == []

    def test_duplicate_proposals_suppressed(self, planted_scene):
        fm, bank = planted_scene["fm"], planted_scene["bank"]
        config = PipelineConfig(k=2, t=8, grid=8, score_threshold=0.0, min_box_area=0.0)
        cls_w = ClsNetWeights.seeded(1 + 8 + 2, block_count=1, width=4)
        proposals = [BBox(126, 154, 112, 112)] * 4
        out = detect(fm, proposals, bank, config, cls_w, similarity_logit_oracle(),
                     IntegralParams.uniform(8))
        for i, d in enumerate(out):
            for other in out[i + 1 :]:
                assert d.box.iou(other.box) <= config.nms_iou

    def test_candidate_accounting(self, planted_scene):
        fm, bank = planted_scene["fm"], planted_scene["bank"]
        proposals = planted_scene["proposals"]
        cls_w = ClsNetWeights.seeded(1 + 8 + 2, block_count=1, width=4)
        for k in (1, 2, 3, 10):
            stats = {}
            detect(fm, proposals, bank,
                   PipelineConfig(k=k, t=8, grid=8, min_box_area=0.0),
                   cls_w, similarity_logit_oracle(), IntegralParams.uniform(8), stats=stats)
            assert stats["candidates_scored"] == len(proposals) * min(k, bank.num_classes)

    def test_planted_object_found(self, planted_scene):
        fm, bank, meta = planted_scene["fm"], planted_scene["bank"], planted_scene["meta"]
        config = PipelineConfig(k=1, t=8, grid=meta["grid"])
        cls_w = ClsNetWeights.seeded(1 + 8 + 2, block_count=1, width=4)
        out = detect(fm, planted_scene["proposals"], bank, config, cls_w,
                     similarity_logit_oracle(), IntegralParams.max_weighted(meta["grid"]))
        assert out and out[0].class_id == meta["class_id"]
        assert out[0].class_name == meta["class"]
        assert out[0].box.iou(BBox.from_corners(*meta["box"])) >= 0.6

    def test_deterministic_with_workers(self, planted_scene):
        fm, bank, meta = planted_scene["fm"], planted_scene["bank"], planted_scene["meta"]
        cls_w = ClsNetWeights.seeded(1 + 8 + 2, block_count=1, width=4)
        runs = []
        for workers in (1, 1, 4):
            config = PipelineConfig(k=2, t=8, grid=meta["grid"], workers=workers,
                                    min_box_area=0.0, score_threshold=0.0)
            runs.append(detect(fm, planted_scene["proposals"], bank, config, cls_w,
                               similarity_logit_oracle(),
                               IntegralParams.uniform(meta["grid"])))
        assert runs[0] == runs[1] == runs[2]

    def test_outputs_respect_bounds_and_area(self, planted_scene):
        fm, bank, meta = planted_scene["fm"], planted_scene["bank"], planted_scene["meta"]
        cls_w = ClsNetWeights.seeded(1 + 8 + 2, block_count=1, width=4)
        loc_w = LocNetWeights.seeded(2 + 2, block_count=1, width=4)
        config = PipelineConfig(k=3, t=8, grid=meta["grid"], score_threshold=0.0,
                                min_box_area=150.0)
        proposals = planted_scene["proposals"] + [BBox.from_corners(-40, -20, 60, 90)]
        out = detect(fm, proposals, bank, config, cls_w, loc_w)
        for d in out:
            x0, y0, x1, y1 = d.box.corners
            assert 0 <= x0 < x1 <= fm.image_width_px
            assert 0 <= y0 < y1 <= fm.image_height_px
            assert d.box.area >= 150.0

    def test_no_background_prototypes(self):
        rng = np.random.default_rng(0)
        fm = FeatureMap(rng.standard_normal((8, 8, 6)).astype(np.float32), 128, 128, 16)
        protos = rng.standard_normal((3, 6))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        bank = PrototypeBank(protos, ("a", "b", "c"), np.zeros((0, 6)), normalized=True)
        config = PipelineConfig(k=2, t=4, grid=8, score_threshold=0.0, min_box_area=0.0)
        cls_w = ClsNetWeights.seeded(1 + 4 + 0, block_count=1, width=4)
        loc_w = LocNetWeights.seeded(2 + 0, block_count=1, width=4)
        stats = {}
        out = detect(fm, [BBox(64, 64, 50, 40)], bank, config, cls_w, loc_w, stats=stats)
        assert stats["candidates_scored"] == 2
        assert all(0 <= d.class_id < 3 for d in out)

    def test_full_size_networks_smoke(self, planted_scene):
        # shipped default widths: 3 gated blocks + 5 plain blocks, 256 channels
        fm, bank, meta = planted_scene["fm"], planted_scene["bank"], planted_scene["meta"]
        config = PipelineConfig(k=3, t=128, grid=meta["grid"], score_threshold=0.0,
                                min_box_area=0.0)
        cls_w = ClsNetWeights.seeded(1 + 128 + bank.num_backgrounds)
        loc_w = LocNetWeights.seeded(2 + bank.num_backgrounds)
        stats = {}
        out = detect(fm, planted_scene["proposals"], bank, config, cls_w, loc_w,
                     stats=stats)
        assert stats["candidates_scored"] == 9
        assert out, "full-size nets should keep at least one detection"
        for d in out:
            assert 0.0 < d.score < 1.0

    def test_validation_errors(self, planted_scene):
        fm, bank = planted_scene["fm"], planted_scene["bank"]
        good_cls = ClsNetWeights.seeded(1 + 8 + 2, block_count=1, width=4)
        with pytest.raises(ValidationError):
            detect(fm, [], bank, PipelineConfig(k=1, t=8), good_cls, similarity_logit_oracle())
        wrong_cls = ClsNetWeights.seeded(7, block_count=1, width=4)
        with pytest.raises(ValidationError):
            detect(fm, [BBox(100, 100, 50, 50)], bank, PipelineConfig(k=1, t=8),
                   wrong_cls, similarity_logit_oracle())
        wrong_loc = LocNetWeights.zeros(in_channels=9)
        with pytest.raises(ValidationError):
            detect(fm, [BBox(100, 100, 50, 50)], bank, PipelineConfig(k=1, t=8),
                   good_cls, wrong_loc)
        small_bank = PrototypeBank(np.eye(2, 5), ("a", "b"), np.zeros((0, 5)), normalized=False)
        with pytest.raises(ValidationError):
            detect(fm, [BBox(100, 100, 50, 50)], small_bank,
                   PipelineConfig(k=1, t=8), good_cls, similarity_logit_oracle())


class TestFiles:
    def test_proposal_parsing(self, tmp_path):
        path = tmp_path / "p.txt"
        path.write_text("# header\n10 20 30 40 0.9\n5 5 25 35\n\n")
        boxes = load_proposals(path)
        assert len(boxes) == 2
        assert boxes[0].corners == (10.0, 20.0, 30.0, 40.0)

    def test_proposal_errors(self, tmp_path):
        path = tmp_path / "p.txt"
        path.write_text("1 2 3\n")
        with pytest.raises(Exception):
            load_proposals(path)
        path.write_text("# only comments\n")
        with pytest.raises(ValidationError):
            load_proposals(path)

    def test_detections_round_trip(self, tmp_path):
        dets = [_det(1, 2, 30, 41.5, 0.75, cid=2, idx=4), _det(0, 0, 9, 9, 0.5, cid=0, idx=1)]
        path = tmp_path / "d.jsonl"
        save_detections(dets, path)
        back = load_detections(path)
        assert [d.class_id for d in back] == [2, 0]
        assert [d.proposal_index for d in back] == [4, 1]
        assert back[0].score == pytest.approx(0.75)
        assert back[0].box.corners == pytest.approx(dets[0].box.corners, abs=1e-4)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValidationError):
            PipelineConfig(k=0)
        with pytest.raises(ValidationError):
            PipelineConfig(nms_iou=0.0)
        with pytest.raises(ValidationError):
            PipelineConfig(min_box_area=-1)
        with pytest.raises(ValidationError):
            PipelineConfig(score_threshold=1.5)

    def test_detection_score_validated(self):
        with pytest.raises(ValidationError):
            _det(0, 0, 10, 10, 0.0)
        with pytest.raises(ValidationError):
            _det(0, 0, 10, 10, float("nan"))
