import json
import threading
import time

import numpy as np
import pytest

from protosearch.evaluation import (
    ERROR,
    FULL,
    OK,
    PROXY,
    TIMEOUT,
    EvaluationCache,
    EvaluationRequest,
    EvaluationResult,
    Evaluator,
    ExternalBinding,
    ReplayBinding,
    SurrogateBinding,
    cache_key,
    evaluate,
    external_evaluate,
    fnv1a_64,
    load_replay_table,
    parse_response,
    replay_evaluate,
    surrogate_score,
    unit_hash,
)
from protosearch.space import SEARCHED, BASELINE, canonical_encode, sample_uniform

from conftest import stub_command


def _fnv_reference(data: bytes) -> int:
    # textbook definition, written out separately from the shipped code
    h = 14695981039346656037
    for b in data:
        h = ((h ^ b) * 1099511628211) % 2**64
    return h


def test_fnv_published_vectors():
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_fnv_matches_reference():
    for s in ["7|main|optimizer|adam", "0|pair|optxlr|adam|5e-4", "héllo"]:
        assert fnv1a_64(s.encode()) == _fnv_reference(s.encode())


def test_surrogate_hand_computation():
    seed = 7
    parts = {
        "alpha_real": "0.1250", "color_format": "gray", "keep_aspect_ratio": "false",
        "data_augmentation": "true", "character_set": "DL", "optimizer": "adam",
        "learning_rate": "5e-4", "lr_schedule": "ms-0.6",
    }
    u = lambda s: _fnv_reference(s.encode()) / 2**64  # noqa: E731
    main = sum(u(f"7|main|{k}|{v}") for k, v in parts.items()) / 8
    pair = 0.5 * (u("7|pair|optxlr|adam|5e-4") + u("7|pair|optxsched|adam|ms-0.6"))
    assert surrogate_score(SEARCHED, seed) == 0.78 + 0.12 * main + 0.08 * pair


def test_surrogate_bounds_and_purity(all_candidates):
    for seed in (0, 1, 2**40):
        scores = [surrogate_score(c, seed) for c in all_candidates]
        assert min(scores) >= 0.78 and max(scores) < 0.98
        assert scores == [surrogate_score(c, seed) for c in all_candidates]
        assert len(set(scores)) == len(scores)


def test_surrogate_depends_on_seed():
    assert surrogate_score(SEARCHED, 1) != surrogate_score(SEARCHED, 2)


def test_unit_hash_range():
    assert 0 <= unit_hash("x") < 1


def test_result_contract():
    with pytest.raises(ValueError):
        EvaluationResult(ERROR, fitness=0.5)
    with pytest.raises(ValueError):
        EvaluationResult(OK)
    with pytest.raises(ValueError):
        EvaluationResult(OK, 1.2)
    with pytest.raises(ValueError):
        EvaluationResult("weird")


class CountingBinding:
    def __init__(self, result=None):
        self.calls = 0
        self.result = result or EvaluationResult(OK, 0.5)
        self.lock = threading.Lock()

    def __call__(self, request):
        with self.lock:
            self.calls += 1
        return self.result


def test_evaluate_cache_hit_skips_binding():
    binding = CountingBinding()
    cache = EvaluationCache()
    req = EvaluationRequest(SEARCHED, PROXY, 1)
    first = evaluate(binding, req, cache)
    second = evaluate(binding, req, cache)
    assert first == second and binding.calls == 1
    evaluate(binding, EvaluationRequest(SEARCHED, FULL, 1), cache)
    evaluate(binding, EvaluationRequest(SEARCHED, PROXY, 2), cache)
    assert binding.calls == 3


def test_evaluate_negative_caching():
    class Crasher:
        calls = 0

        def __call__(self, request):
            self.calls += 1
            raise RuntimeError("segfault")

    crasher, cache = Crasher(), EvaluationCache()
    req = EvaluationRequest(SEARCHED, PROXY, 0)
    r1 = evaluate(crasher, req, cache)
    r2 = evaluate(crasher, req, cache)
    assert r1.status == ERROR and r1.fitness is None and "segfault" in r1.message
    assert r2 is r1 and crasher.calls == 1


def test_cache_insert_once():
    cache = EvaluationCache()
    a, b = EvaluationResult(OK, 0.1), EvaluationResult(OK, 0.2)
    assert cache.put("k", a) is a
    assert cache.put("k", b) is a
    assert cache.get("k") is a


def test_cache_coalesces_concurrent_misses():
    calls = []
    gate = threading.Event()

    def slow():
        calls.append(1)
        gate.wait(5)
        return EvaluationResult(OK, 0.3)

    cache = EvaluationCache()
    out = []
    threads = [threading.Thread(target=lambda: out.append(cache.get_or_compute("k", slow))) for _ in range(6)]
    for t in threads:
        t.start()
    time.sleep(0.2)
    gate.set()
    for t in threads:
        t.join()
    assert len(calls) == 1
    assert sorted(hit for _, hit in out) == [False] + [True] * 5


def test_surrogate_binding_via_evaluate():
    rng = np.random.default_rng(3)
    cache = EvaluationCache()
    from protosearch.space import default_space

    space = default_space()
    for _ in range(50):
        r = evaluate(SurrogateBinding(11), EvaluationRequest(sample_uniform(space, rng), PROXY, 0), cache)
        assert r.status == OK and 0.78 <= r.fitness < 0.98


def test_request_json_roundtrip(space):
    req = EvaluationRequest(SEARCHED, PROXY, 42)
    doc = json.loads(json.dumps(req.to_json()))
    assert doc == {
        "candidate": {
            "alpha_real": 0.125, "color_format": "gray", "keep_aspect_ratio": False,
            "data_augmentation": True, "character_set": "DL", "optimizer": "adam",
            "learning_rate": 0.0005, "lr_schedule": "ms-0.6",
        },
        "fidelity": {"total_iterations": 50000, "data_fraction": 0.2, "batch_size": 256,
                     "proxy_model": "crnn-proxy"},
        "seed": 42,
    }
    back = EvaluationRequest.from_json(doc, space)
    assert back == req and cache_key(back) == cache_key(req)


def test_fidelity_presets():
    assert (PROXY.total_iterations, PROXY.data_fraction, PROXY.batch_size, PROXY.proxy_model) == (50_000, 0.2, 256, "crnn-proxy")
    assert (FULL.total_iterations, FULL.data_fraction, FULL.batch_size, FULL.proxy_model) == (300_000, 1.0, 256, "target")
    assert FULL.total_iterations // PROXY.total_iterations == 6


# -- external process ---------------------------------------------------------

REQ = EvaluationRequest(SEARCHED, PROXY, 0)


def test_external_ok():
    r = external_evaluate(stub_command("ok"), REQ, 20)
    assert r.status == OK and r.fitness == 0.843 and r.eval_seconds > 0


def test_external_receives_request():
    r = external_evaluate(stub_command("echo"), REQ, 20)
    assert json.loads(r.message) == REQ.to_json()


def test_external_nonzero_exit():
    r = external_evaluate(stub_command("fail"), REQ, 20)
    assert r.status == ERROR and r.fitness is None
    assert "exit code 3" in r.message and "trainer crashed" in r.message


def test_external_timeout():
    t0 = time.monotonic()
    r = external_evaluate(stub_command("sleep"), REQ, 0.5)
    assert r.status == TIMEOUT and r.fitness is None
    assert time.monotonic() - t0 < 10


def test_external_out_of_range():
    r = external_evaluate(stub_command("range"), REQ, 20)
    assert r.status == ERROR and "outside" in r.message


def test_external_malformed_json():
    r = external_evaluate(stub_command("garbage"), REQ, 20)
    assert r.status == ERROR and "malformed" in r.message


def test_external_reported_error():
    r = external_evaluate(stub_command("reported-error"), REQ, 20)
    assert r.status == ERROR and r.message == "CUDA out of memory"


def test_external_missing_executable():
    r = external_evaluate(["/nonexistent/trainer"], REQ, 5)
    assert r.status == ERROR


def test_external_string_command():
    import shlex

    r = external_evaluate(shlex.join(stub_command("ok")), REQ, 20)
    assert r.fitness == 0.843


@pytest.mark.parametrize("payload,status", [
    ('{"accuracy": 0.5, "status": "ok"}', OK),
    ('{"accuracy": 0, "status": "ok"}', OK),
    ('{"accuracy": 1, "status": "ok"}', OK),
    ('{"accuracy": -0.1, "status": "ok"}', ERROR),
    ('{"accuracy": true, "status": "ok"}', ERROR),
    ('{"accuracy": "0.5", "status": "ok"}', ERROR),
    ('{"status": "ok"}', ERROR),
    ('[0.5]', ERROR),
])
def test_parse_response(payload, status):
    assert parse_response(payload)[0] == status


def test_external_binding_limits_processes():
    binding = ExternalBinding(stub_command("ok"), timeout_seconds=20, max_processes=2)
    ev = Evaluator(binding, PROXY, 0, jobs=4)
    rng = np.random.default_rng(0)
    from protosearch.space import default_space

    cands = [sample_uniform(default_space(), rng) for _ in range(4)]
    results = ev.score_batch(cands)
    assert all(r.fitness == 0.843 for r, _ in results)


# -- replay --------------------------------------------------------------------


def test_replay_lookup(tmp_path):
    path = tmp_path / "table.csv"
    key = canonical_encode(SEARCHED)
    path.write_text(f"key,fidelity,fitness\n{key},proxy,0.87\n{key},full,0.882\n")
    table = load_replay_table(path)
    assert replay_evaluate(table, EvaluationRequest(SEARCHED, PROXY, 0)).fitness == 0.87
    assert replay_evaluate(table, EvaluationRequest(SEARCHED, FULL, 0)).fitness == 0.882
    missing = replay_evaluate(table, EvaluationRequest(BASELINE, PROXY, 0))
    assert missing.status == ERROR and missing.fitness is None
    assert ReplayBinding(path)(EvaluationRequest(SEARCHED, PROXY, 5)).fitness == 0.87


def test_replay_bad_header(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("a,b,c\nx,proxy,0.1\n")
    with pytest.raises(ValueError):
        load_replay_table(path)
    path.write_text("key,fidelity,fitness\nx,proxy,1.7\n")
    with pytest.raises(ValueError):
        load_replay_table(path)


# -- Evaluator front end ------------------------------------------------------------


def test_score_batch_hit_flags_follow_order():
    binding = CountingBinding()
    ev = Evaluator(binding, PROXY, 0, jobs=3)
    other = SEARCHED.replace(lr_schedule="constant")
    results = ev.score_batch([SEARCHED, other, SEARCHED, other, SEARCHED])
    assert [hit for _, hit in results] == [False, False, True, True, True]
    assert binding.calls == 2
    assert [hit for _, hit in ev.score_batch([other])] == [True]
    assert binding.calls == 2
