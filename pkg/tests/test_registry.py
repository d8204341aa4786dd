from __future__ import annotations

import json
import random

import pytest

import unitask.registry as registry_mod
from unitask.artifacts import ArtifactRef, ArtifactStore, MediaKind
from unitask.registry import (
    DuplicateKind,
    ExecutionResult,
    ExpertDescriptor,
    ExpertRegistry,
    MockBackend,
    NoExpertRegistered,
    RemoteBackend,
    default_registry,
    dispatch,
    idempotency_key,
    mock_execute,
    rasterize_mask,
    registry_from_config,
)
from unitask.routing import SessionContext, TaskInvocation, route
from unitask.tokens import Region, TaskKind, parse

from genmsg import rand_message

IMG = ArtifactRef(digest="a" * 64, media=MediaKind.IMAGE)
FULL_CTX = SessionContext(
    session_id="s1",
    slots={
        "current_image": IMG,
        "current_video": ArtifactRef(digest="b" * 64, media=MediaKind.VIDEO),
        "current_audio": ArtifactRef(digest="c" * 64, media=MediaKind.AUDIO),
    },
)


def inv(kind: TaskKind, prompt: str = "p", regions=(), inputs=(), ordinal: int = 0) -> TaskInvocation:
    return TaskInvocation(
        kind=kind, prompt=prompt, regions=tuple(regions), input_artifacts=tuple(inputs), ordinal=ordinal
    )


class TestRegistry:
    def test_one_descriptor_many_kinds(self):
        r = ExpertRegistry()
        d = ExpertDescriptor("seem", frozenset({TaskKind.IMAGE_SEG, TaskKind.VIDEO_SEG}), MockBackend())
        r.register(d)
        assert r.resolve(TaskKind.IMAGE_SEG) is d
        assert r.resolve(TaskKind.VIDEO_SEG) is d

    def test_duplicate_kind_rejected(self):
        r = ExpertRegistry()
        r.register(ExpertDescriptor("seem", frozenset({TaskKind.IMAGE_SEG}), MockBackend()))
        with pytest.raises(DuplicateKind):
            r.register(ExpertDescriptor("other", frozenset({TaskKind.IMAGE_SEG}), MockBackend()))

    def test_empty_kinds_rejected(self):
        with pytest.raises(ValueError):
            ExpertDescriptor("x", frozenset(), MockBackend())

    def test_unregistered_kind(self):
        with pytest.raises(NoExpertRegistered):
            ExpertRegistry().resolve(TaskKind.IMAGE_GEN)

    def test_default_mapping(self):
        r = default_registry()
        expected = {
            TaskKind.IMAGE_GEN: "stable-diffusion",
            TaskKind.LAYOUT_GEN: "gligen-layout",
            TaskKind.IMAGE_EDIT_GLOBAL: "instruct-pix2pix",
            TaskKind.IMAGE_EDIT_REGION: "gligen-edit",
            TaskKind.IMAGE_SEG: "seem",
            TaskKind.VIDEO_SEG: "seem",
            TaskKind.VIDEO_EDIT: "fresco",
            TaskKind.VIDEO_GEN: "modelscope-t2v",
            TaskKind.IMAGE_TO_VIDEO: "i2vgen-xl",
            TaskKind.AUDIO_GEN: "auffusion",
        }
        for kind, name in expected.items():
            assert r.resolve(kind).name == name
        assert r.kinds() == frozenset(TaskKind)

    def test_from_config(self):
        r = registry_from_config(
            [
                {"name": "gen", "kinds": ["ImageGen"], "backend": "mock", "seed": 7},
                {
                    "name": "far-seg",
                    "kinds": ["ImageSeg", "VideoSeg"],
                    "backend": "remote",
                    "endpoint": "http://experts.local/seg",
                    "timeout_ms": 500,
                    "max_retries": 1,
                },
            ]
        )
        assert r.resolve(TaskKind.IMAGE_GEN).backend == MockBackend(seed=7)
        seg = r.resolve(TaskKind.VIDEO_SEG)
        assert seg.backend == RemoteBackend(endpoint="http://experts.local/seg", timeout=0.5, max_retries=1)

    def test_from_config_unknown_backend(self):
        with pytest.raises(ValueError):
            registry_from_config([{"name": "x", "kinds": ["ImageGen"], "backend": "carrier-pigeon"}])


class TestMockExecute:
    def test_deterministic(self):
        store = ArtifactStore()
        i = inv(TaskKind.IMAGE_GEN, "a cat on a mat")
        a = mock_execute(i, 3, store)
        b = mock_execute(i, 3, store)
        assert a == b

    def test_seed_sensitivity(self):
        store = ArtifactStore()
        i = inv(TaskKind.IMAGE_GEN, "a cat on a mat")
        assert mock_execute(i, 1, store).artifact != mock_execute(i, 2, store).artifact

    def test_input_sensitivity(self):
        store = ArtifactStore()
        i1 = inv(TaskKind.IMAGE_EDIT_GLOBAL, "warmer", inputs=(IMG,))
        i2 = inv(
            TaskKind.IMAGE_EDIT_GLOBAL,
            "warmer",
            inputs=(ArtifactRef(digest="d" * 64, media=MediaKind.IMAGE),),
        )
        assert mock_execute(i1, 0, store, (IMG,)).artifact != mock_execute(
            i2, 0, store, i2.input_artifacts
        ).artifact

    def test_output_media_matches_kind(self):
        store = ArtifactStore()
        cases = {
            TaskKind.IMAGE_GEN: MediaKind.IMAGE,
            TaskKind.VIDEO_GEN: MediaKind.VIDEO,
            TaskKind.AUDIO_GEN: MediaKind.AUDIO,
            TaskKind.LAYOUT_GEN: MediaKind.LAYOUT,
        }
        for kind, media in cases.items():
            regions = (Region(0.1, 0.1, 0.5, 0.5),) if kind is TaskKind.LAYOUT_GEN else ()
            out = mock_execute(inv(kind, "x", regions=regions), 0, store)
            assert out.artifact.media is media
            assert store.has(out.artifact)

    def test_center_box_on_4x4_grid(self):
        mask = rasterize_mask((Region(0.25, 0.25, 0.75, 0.75),), grid=4)
        assert mask == ("0000", "0110", "0110", "0000")

    def test_mask_cells_match_center_arithmetic(self):
        rng = random.Random(5)
        for _ in range(50):
            coords = sorted(rng.uniform(0, 1) for _ in range(2))
            coords_y = sorted(rng.uniform(0, 1) for _ in range(2))
            region = Region(coords[0], coords_y[0], coords[1], coords_y[1])
            grid = rng.choice([4, 8, 16])
            mask = rasterize_mask((region,), grid=grid)
            for i in range(grid):
                for j in range(grid):
                    cx, cy = (j + 0.5) / grid, (i + 0.5) / grid
                    want = region.x1 <= cx <= region.x2 and region.y1 <= cy <= region.y2
                    assert (mask[i][j] == "1") == want

    def test_seg_mock_returns_mask(self):
        out = mock_execute(
            inv(TaskKind.IMAGE_SEG, "the cat", regions=(Region(0.25, 0.25, 0.75, 0.75),)),
            0,
            ArtifactStore(),
        )
        assert out.artifact.media is MediaKind.MASK
        assert out.mask is not None and len(out.mask) == 16

    def test_layout_mock_pairs_words_with_regions(self):
        regions = (Region(0, 0, 0.5, 0.5), Region(0.5, 0.5, 1, 1))
        out = mock_execute(inv(TaskKind.LAYOUT_GEN, "red car", regions=regions), 0, ArtifactStore())
        assert out.layout == (("red", regions[0]), ("car", regions[1]))


class TestDispatch:
    def test_single_generation(self):
        plan = route(parse("<Gen>a cat</Gen>"), SessionContext(session_id="s1"))
        a = dispatch(plan, default_registry())
        b = dispatch(plan, default_registry())
        assert a == b
        assert a.outcomes[0].status == "ok"
        assert a.outcomes[0].output.expert_name == "stable-diffusion"

    def test_empty_plan(self):
        plan = route(parse("nothing here"), SessionContext(session_id="s1"))
        result = dispatch(plan, default_registry())
        assert result.outcomes == ()
        assert result.total_latency_ms == 0

    def test_unregistered_kind_raises(self):
        plan = route(parse("<Gen>a cat</Gen>"), SessionContext(session_id="s1"))
        with pytest.raises(NoExpertRegistered):
            dispatch(plan, ExpertRegistry())

    def test_panic_becomes_failure(self, monkeypatch):
        real = mock_execute

        def flaky(task, seed, store, inputs=(), **kw):
            if "boom" in task.prompt:
                raise RuntimeError("synthetic expert crash")
            return real(task, seed, store, inputs, **kw)

        monkeypatch.setattr(registry_mod, "mock_execute", flaky)
        plan = route(parse("<Gen>boom</Gen> <AGen>calm piano</AGen>"), SessionContext(session_id="s1"))
        result = dispatch(plan, default_registry())
        assert result.outcomes[0].status == "error"
        assert result.outcomes[0].error_code == "expert-panic"
        assert result.outcomes[1].status == "ok"

    def test_upstream_failure_skips_only_dependents(self, monkeypatch):
        real = mock_execute

        def flaky(task, seed, store, inputs=(), **kw):
            if "boom" in task.prompt:
                raise RuntimeError("synthetic expert crash")
            return real(task, seed, store, inputs, **kw)

        monkeypatch.setattr(registry_mod, "mock_execute", flaky)
        text = "<Gen>boom</Gen> <GlobalEdit>make it rainy</GlobalEdit> <AGen>rain sounds</AGen>"
        plan = route(parse(text), SessionContext(session_id="s1"))
        result = dispatch(plan, default_registry())
        assert [o.status for o in result.outcomes] == ["error", "error", "ok"]
        assert result.outcomes[1].error_code == "upstream-failure"

    def test_pending_artifact_resolved_to_real_digest(self):
        plan = route(
            parse("<Gen>a cat</Gen> <GlobalEdit>make it rainy</GlobalEdit>"),
            SessionContext(session_id="s1"),
        )
        store = ArtifactStore()
        result = dispatch(plan, default_registry(), store=store)
        gen_ref = result.outcomes[0].output.artifact
        edit_bytes = store.get(result.outcomes[1].output.artifact)
        assert gen_ref.digest.encode() in edit_bytes

    def test_outcome_alignment(self):
        rng = random.Random(9)
        reg = default_registry()
        for _ in range(100):
            msg = rand_message(rng, min_tasks=1)
            plan = route(msg, FULL_CTX)
            result = dispatch(plan, reg)
            assert [o.ordinal for o in result.outcomes] == [i.ordinal for i in plan.invocations]

    def test_result_round_trips_through_json(self):
        plan = route(
            parse("<Seg>the cat</Seg><box>[0.25,0.25,0.75,0.75]</box>"), FULL_CTX
        )
        result = dispatch(plan, default_registry())
        doc = json.loads(json.dumps(result.to_json_dict()))
        assert ExecutionResult.from_json_dict(doc) == result

    def test_idempotency_key_is_stable(self):
        assert idempotency_key("abc", 2) == idempotency_key("abc", 2)
        assert idempotency_key("abc", 2) != idempotency_key("abc", 3)
        assert len(idempotency_key("abc", 2)) == 32
