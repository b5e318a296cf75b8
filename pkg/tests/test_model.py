import numpy as np
import pytest

from xpg.errors import ContainerFormatError, OutOfRangeError
from xpg.model import (
    ExpertTensorId,
    HEADER_SIZE,
    ModelSpec,
    TensorKind,
    WeightContainer,
    bf16_to_float32,
    float32_to_bf16,
    generate_synthetic_model,
    iter_tensor_ids,
    tensor_offset,
)

TINY = ModelSpec(num_layers=2, experts_per_layer=2, hidden_dim=4, intermediate_dim=8)


def test_sigma_definitions():
    # sigma1 = 2*H*2F, sigma2 = 2*F*H
    assert TINY.sigma_gate_up == 2 * 4 * 16 == 128
    assert TINY.sigma_down == 2 * 8 * 4 == 64
    assert TINY.sigma_gate_up % 2 == 0 and TINY.sigma_down % 2 == 0
    assert TINY.layer_bytes == 2 * (128 + 64)
    assert TINY.total_bytes == 2 * TINY.layer_bytes == 768


def test_spec_validation():
    with pytest.raises(OutOfRangeError):
        ModelSpec(1, 2, 4, 8)
    with pytest.raises(OutOfRangeError):
        ModelSpec(2, 0, 4, 8)
    with pytest.raises(OutOfRangeError):
        ModelSpec(2, 2, 0, 8)


def test_generation_deterministic():
    a = generate_synthetic_model(TINY, seed=1)
    b = generate_synthetic_model(TINY, seed=1)
    assert a.to_bytes() == b.to_bytes()
    c = generate_synthetic_model(TINY, seed=2)
    assert a.to_bytes() != c.to_bytes()


def test_generation_payload_size():
    container = generate_synthetic_model(TINY, seed=1)
    assert len(container.payload) == 768
    assert len(container.to_bytes()) == HEADER_SIZE + 768


def test_tensor_offset_closed_form():
    assert tensor_offset(ExpertTensorId(1, 1, TensorKind.GATE_UP), TINY) == 0
    # adjacency: down follows gate/up of the same expert
    spec = ModelSpec(2, 2, 8, 8)  # sigma1 = 256, sigma2 = 128
    assert spec.sigma_gate_up == 256 and spec.sigma_down == 128
    assert tensor_offset(ExpertTensorId(1, 1, TensorKind.DOWN), spec) == 256
    assert tensor_offset(ExpertTensorId(2, 1, TensorKind.GATE_UP), spec) == 768


def test_tensor_offsets_dense_and_disjoint():
    spans = []
    for tid in iter_tensor_ids(TINY):
        off = tensor_offset(tid, TINY)
        size = TINY.sigma(tid.kind)
        spans.append((off, off + size))
    spans.sort()
    assert spans[0][0] == 0
    assert spans[-1][1] == TINY.total_bytes
    for (_, end), (start, _) in zip(spans, spans[1:]):
        assert end == start


def test_tensor_offset_out_of_range():
    with pytest.raises(OutOfRangeError):
        tensor_offset(ExpertTensorId(3, 1, TensorKind.GATE_UP), TINY)
    with pytest.raises(OutOfRangeError):
        tensor_offset(ExpertTensorId(1, 3, TensorKind.DOWN), TINY)


def test_container_roundtrip_identity():
    container = generate_synthetic_model(TINY, seed=5)
    again = WeightContainer.from_bytes(container.to_bytes())
    assert again.spec == TINY
    assert again.payload == container.payload
    # reading every tensor back and re-concatenating reproduces the payload
    rebuilt = b"".join(container.tensor_bytes(t) for t in iter_tensor_ids(TINY))
    assert rebuilt == container.payload


def test_container_format_errors():
    container = generate_synthetic_model(TINY, seed=5)
    raw = container.to_bytes()
    with pytest.raises(ContainerFormatError):
        WeightContainer.from_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ContainerFormatError):
        WeightContainer.from_bytes(raw[:-1])


def test_tensor_sizes_match_kind():
    container = generate_synthetic_model(TINY, seed=5)
    for tid in iter_tensor_ids(TINY):
        assert len(container.tensor_bytes(tid)) == TINY.sigma(tid.kind)


def test_bf16_round_to_nearest_even():
    # 1.0 survives exactly; values halfway between bf16 steps round to even
    assert float32_to_bf16(np.array([1.0], dtype=np.float32))[0] == 0x3F80
    assert float32_to_bf16(np.array([0.0], dtype=np.float32))[0] == 0x0000
    assert float32_to_bf16(np.array([-2.0], dtype=np.float32))[0] == 0xC000
    roundtrip = bf16_to_float32(float32_to_bf16(np.array([0.02], dtype=np.float32)))[0]
    assert abs(roundtrip - 0.02) < 0.02 * 2**-8


def test_bf16_conversion_is_value_roundtrip():
    words = np.arange(0, 1 << 15, 7, dtype=np.uint16)  # positive patterns
    floats = bf16_to_float32(words)
    finite = np.isfinite(floats)
    back = float32_to_bf16(floats[finite])
    assert np.array_equal(back, words[finite])


def test_weight_distribution_matches_generator():
    container = generate_synthetic_model(ModelSpec(2, 2, 32, 64), seed=3)
    values = bf16_to_float32(np.frombuffer(container.payload, dtype="<u2"))
    assert abs(float(values.mean())) < 1e-3
    assert abs(float(values.std()) - 0.02) < 1e-3
