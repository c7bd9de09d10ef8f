"""
激活值存储测试

测试清单/数据文件的读写校验以及时间分辨率对齐。
"""

from fractions import Fraction

import numpy as np
import pytest
import yaml

from core.actvstore import (
    ActivationSet,
    LayerActivation,
    align_layers,
    align_pair,
    broadcast_vector,
    load_activation_set,
    load_labels,
    save_activation_set,
    save_labels,
    upsample_repeat,
)
from utils.exceptions import ActivationStoreException, AlignmentException


@pytest.fixture
def rng():
    """固定种子的随机数生成器"""
    return np.random.default_rng(7)


@pytest.fixture
def random_set(rng):
    """随机 3 层激活值集合（float32 载荷）"""
    lengths = [5, 3, 8, 1]
    dims = [4, 6, 2]
    layers = [
        LayerActivation(
            layer_id=index,
            sequences=[rng.standard_normal((t, dim)).astype(np.float32) for t in lengths]
        )
        for index, dim in enumerate(dims)
    ]
    return ActivationSet(model_name="random", frame_hop=Fraction(3, 2), layers=layers)


class TestActivationModel:
    """测试激活值数据模型的不变量"""

    def test_default_utterance_ids(self, random_set):
        """测试未提供语句 ID 时自动生成"""
        assert random_set.utterance_ids == ["utt00000", "utt00001", "utt00002", "utt00003"]
        assert random_set.num_layers == 3
        assert random_set.layers[1].dim == 6

    def test_empty_layer_list_rejected(self):
        """测试 L >= 1"""
        with pytest.raises(ActivationStoreException) as exc_info:
            ActivationSet(model_name="empty", frame_hop=Fraction(1), layers=[])
        assert "至少需要 1 层" in str(exc_info.value)

    def test_layer_ids_must_be_contiguous(self):
        """测试层编号必须为 0..L-1"""
        layer = LayerActivation(layer_id=1, sequences=[np.zeros((2, 2))])
        with pytest.raises(ActivationStoreException) as exc_info:
            ActivationSet(model_name="gap", frame_hop=Fraction(1), layers=[layer])
        assert "连续" in str(exc_info.value)

    def test_sequence_count_mismatch(self):
        """测试各层序列数必须相同"""
        layers = [
            LayerActivation(layer_id=0, sequences=[np.zeros((2, 2))]),
            LayerActivation(layer_id=1, sequences=[np.zeros((2, 2)), np.zeros((2, 2))]),
        ]
        with pytest.raises(ActivationStoreException):
            ActivationSet(model_name="bad", frame_hop=Fraction(1), layers=layers)

    def test_non_finite_rejected(self):
        """测试非有限值"""
        seq = np.array([[0.0, np.nan]])
        with pytest.raises(ActivationStoreException) as exc_info:
            LayerActivation(layer_id=0, sequences=[seq])
        assert "非有限值" in str(exc_info.value)

    def test_mixed_dims_rejected(self):
        """测试同一层维度必须一致"""
        with pytest.raises(ActivationStoreException):
            LayerActivation(layer_id=0, sequences=[np.zeros((2, 3)), np.zeros((2, 4))])

    def test_segment_level_requires_single_row(self):
        """测试段级层每条序列只有 1 行"""
        with pytest.raises(ActivationStoreException):
            LayerActivation(layer_id=0, sequences=[np.zeros((3, 2))], is_segment_level=True)


class TestSaveLoad:
    """测试落盘容器"""

    def test_smallest_valid_set(self, tmp_path):
        """测试 1 层、1 条 3×2 序列"""
        values = np.arange(6, dtype=np.float32).reshape(3, 2)
        manifest = {
            "format_version": 1,
            "model_name": "tiny",
            "frame_hop": "1",
            "utterance_ids": ["a"],
            "layers": [{
                "layer_id": 0, "dim": 2, "is_segment_level": False,
                "data_file": "layer_000.f32", "frame_counts": [3],
            }],
        }
        values.astype("<f4").tofile(tmp_path / "layer_000.f32")
        (tmp_path / "manifest.yaml").write_text(yaml.safe_dump(manifest), encoding="utf-8")

        loaded = load_activation_set(tmp_path / "manifest.yaml")

        assert loaded.num_layers == 1
        assert loaded.layers[0].dim == 2
        assert loaded.layers[0].frame_counts == [3]
        np.testing.assert_array_equal(loaded.layers[0].sequences[0], values)

    def test_round_trip_is_lossless(self, random_set, tmp_path):
        """测试保存后读回逐元素相等"""
        save_activation_set(random_set, tmp_path)
        loaded = load_activation_set(tmp_path)

        assert loaded.model_name == "random"
        assert loaded.frame_hop == Fraction(3, 2)
        assert loaded.utterance_ids == random_set.utterance_ids
        for original, restored in zip(random_set.layers, loaded.layers):
            for a, b in zip(original.sequences, restored.sequences):
                np.testing.assert_array_equal(a, b)

    def test_save_load_save_is_byte_identical(self, random_set, tmp_path):
        """测试 save/load/save 字节一致"""
        first, second = tmp_path / "first", tmp_path / "second"
        save_activation_set(random_set, first)
        save_activation_set(load_activation_set(first), second)

        for name in ["manifest.yaml", "layer_000.f32", "layer_001.f32", "layer_002.f32"]:
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_one_layer_set_writes_one_data_file(self, tmp_path):
        """测试 1 层集合只写出清单与一个数据文件"""
        layer = LayerActivation(layer_id=0, sequences=[np.ones((4, 2), dtype=np.float32)])
        save_activation_set(ActivationSet("one", Fraction(1), [layer]), tmp_path)

        assert sorted(p.name for p in tmp_path.iterdir()) == ["layer_000.f32", "manifest.yaml"]

    def test_frame_count_mismatch(self, random_set, tmp_path):
        """测试帧数与文件大小不符"""
        save_activation_set(random_set, tmp_path)
        manifest_path = tmp_path / "manifest.yaml"
        manifest = yaml.safe_load(manifest_path.read_text(encoding="utf-8"))
        manifest["layers"][0]["frame_counts"][0] += 1
        manifest_path.write_text(yaml.safe_dump(manifest), encoding="utf-8")

        with pytest.raises(ActivationStoreException) as exc_info:
            load_activation_set(manifest_path)
        assert "不匹配" in str(exc_info.value)

    def test_missing_manifest_names_path(self, tmp_path):
        """测试清单缺失时错误信息包含路径"""
        missing = tmp_path / "nowhere"
        with pytest.raises(ActivationStoreException) as exc_info:
            load_activation_set(missing)
        assert "nowhere" in str(exc_info.value)

    def test_missing_data_file(self, random_set, tmp_path):
        """测试数据文件缺失"""
        save_activation_set(random_set, tmp_path)
        (tmp_path / "layer_001.f32").unlink()

        with pytest.raises(ActivationStoreException) as exc_info:
            load_activation_set(tmp_path)
        assert exc_info.value.details["layer_id"] == 1

    def test_unsupported_format_version(self, random_set, tmp_path):
        """测试不支持的清单版本"""
        save_activation_set(random_set, tmp_path)
        manifest_path = tmp_path / "manifest.yaml"
        manifest = yaml.safe_load(manifest_path.read_text(encoding="utf-8"))
        manifest["format_version"] = 99
        manifest_path.write_text(yaml.safe_dump(manifest), encoding="utf-8")

        with pytest.raises(ActivationStoreException) as exc_info:
            load_activation_set(manifest_path)
        assert "版本" in str(exc_info.value)

    def test_non_finite_payload(self, tmp_path):
        """测试数据文件中的非有限值在加载时报错"""
        layer = LayerActivation(layer_id=0, sequences=[np.ones((4, 2), dtype=np.float32)])
        save_activation_set(ActivationSet("inf", Fraction(1), [layer]), tmp_path)
        payload = np.ones(8, dtype="<f4")
        payload[3] = np.inf
        payload.tofile(tmp_path / "layer_000.f32")

        with pytest.raises(ActivationStoreException) as exc_info:
            load_activation_set(tmp_path)
        assert "非有限值" in str(exc_info.value)

    def test_values_beyond_float32_rejected_on_save(self, tmp_path):
        """测试超出 float32 范围的值在写出前被拒绝，且不留下任何文件"""
        ok = LayerActivation(layer_id=0, sequences=[np.ones((4, 2))])
        huge = LayerActivation(layer_id=1, sequences=[np.full((4, 2), 1e300)])
        out_dir = tmp_path / "acts"

        with pytest.raises(ActivationStoreException) as exc_info:
            save_activation_set(ActivationSet("huge", Fraction(1), [ok, huge]), out_dir)
        assert "float32" in str(exc_info.value)
        assert exc_info.value.details["layer_id"] == 1
        assert not out_dir.exists()


class TestLabels:
    """测试标签文件"""

    def test_round_trip_in_utterance_order(self, tmp_path):
        """测试标签按语句顺序读回"""
        ids = ["u0", "u1", "u2"]
        save_labels(tmp_path / "labels.csv", ids, [2, 0, 1])

        labels = load_labels(tmp_path / "labels.csv", ["u2", "u0", "u1"])

        np.testing.assert_array_equal(labels, [1, 2, 0])

    def test_mismatch_rejected(self, tmp_path):
        """测试标签与语句不对应"""
        save_labels(tmp_path / "labels.csv", ["u0", "u1"], [0, 1])
        with pytest.raises(ActivationStoreException) as exc_info:
            load_labels(tmp_path / "labels.csv", ["u0", "u1", "u2"])
        assert "不对应" in str(exc_info.value)


class TestUpsampleAndBroadcast:
    """测试重复上采样与广播"""

    def test_factor_two(self):
        """测试 [a, b] 重复两次得到 [a, a, b, b]"""
        seq = np.array([[1.0, 2.0], [3.0, 4.0]])
        expected = np.array([[1.0, 2.0], [1.0, 2.0], [3.0, 4.0], [3.0, 4.0]])
        np.testing.assert_array_equal(upsample_repeat(seq, 2), expected)

    def test_factor_two_exhaustive_small_cases(self):
        """测试 T <= 6 时 2 倍重复的每一行"""
        for frames in range(1, 7):
            seq = np.arange(frames * 3, dtype=np.float64).reshape(frames, 3)
            out = upsample_repeat(seq, 2)
            assert out.shape == (2 * frames, 3)
            for i in range(2 * frames):
                np.testing.assert_array_equal(out[i], seq[i // 2])
            np.testing.assert_array_equal(out[::2], seq)

    def test_factor_one_is_identity(self, rng):
        """测试倍数为 1 时不变"""
        seq = rng.standard_normal((5, 3))
        np.testing.assert_array_equal(upsample_repeat(seq, 1), seq)

    def test_factor_three(self):
        """测试 [a, b, c] 重复三次"""
        seq = np.array([[1.0], [2.0], [3.0]])
        out = upsample_repeat(seq, 3)
        np.testing.assert_array_equal(out[:, 0], [1, 1, 1, 2, 2, 2, 3, 3, 3])

    def test_factor_zero_rejected(self):
        """测试倍数为 0"""
        with pytest.raises(AlignmentException):
            upsample_repeat(np.zeros((2, 2)), 0)

    def test_broadcast_rows_and_rank(self, rng):
        """测试广播后每行相等且秩为 1"""
        vec = rng.standard_normal((1, 5))
        for length in (1, 4, 9):
            out = broadcast_vector(vec, length)
            assert out.shape == (length, 5)
            assert np.all(out == vec)
            assert np.linalg.matrix_rank(out) == 1

    def test_broadcast_zero_length_rejected(self):
        """测试广播长度为 0"""
        with pytest.raises(AlignmentException):
            broadcast_vector(np.ones(3), 0)


class TestAlignPair:
    """测试两条序列的对齐"""

    def test_equal_hops(self, rng):
        """测试帧率相同长度相同时不变"""
        a, b = rng.standard_normal((5, 2)), rng.standard_normal((5, 3))
        x, y = align_pair(a, b, Fraction(1), Fraction(1))
        np.testing.assert_array_equal(x, a)
        np.testing.assert_array_equal(y, b)

    def test_hop_ratio_two(self, rng):
        """测试帧率比 2，长度 10 vs 21 对齐为 20 行"""
        low, high = rng.standard_normal((10, 2)), rng.standard_normal((21, 2))
        x, y = align_pair(low, high, Fraction(1), Fraction(2))

        assert x.shape[0] == y.shape[0] == 20
        np.testing.assert_array_equal(x, upsample_repeat(low, 2))
        np.testing.assert_array_equal(y, high[:20])

    def test_swap_swaps_outputs(self, rng):
        """测试交换参数顺序时输出随之交换"""
        a, b = rng.standard_normal((7, 2)), rng.standard_normal((15, 4))
        x1, y1 = align_pair(a, b, Fraction(1), Fraction(2))
        y2, x2 = align_pair(b, a, Fraction(2), Fraction(1))
        np.testing.assert_array_equal(x1, x2)
        np.testing.assert_array_equal(y1, y2)

    def test_near_integer_ratio_is_rounded(self, rng):
        """测试“接近两倍”的帧率比取整为 2"""
        a, b = rng.standard_normal((10, 2)), rng.standard_normal((19, 2))
        x, y = align_pair(a, b, Fraction(50), Fraction(98))
        assert x.shape[0] == y.shape[0] == 19

    def test_non_integer_ratio_rejected(self, rng):
        """测试帧率比 1.5 无法按重复对齐"""
        with pytest.raises(AlignmentException):
            align_pair(rng.standard_normal((4, 2)), rng.standard_normal((6, 2)),
                       Fraction(2), Fraction(3))

    def test_segment_level_broadcast(self, rng):
        """测试段级向量广播到帧级长度 7"""
        vec, frames = rng.standard_normal((1, 3)), rng.standard_normal((7, 2))
        x, y = align_pair(vec, frames, Fraction(1), Fraction(1), segment_a=True)

        assert x.shape == (7, 3)
        assert y.shape == (7, 2)
        assert np.all(x == vec)

    def test_empty_sequence_rejected(self):
        """测试空序列"""
        with pytest.raises(AlignmentException):
            align_pair(np.zeros((0, 2)), np.zeros((3, 2)), Fraction(1), Fraction(1))

    def test_align_layers_per_utterance(self, rng):
        """测试逐语句对齐两层"""
        frame_layer = LayerActivation(0, [rng.standard_normal((t, 2)) for t in (4, 6)])
        segment_layer = LayerActivation(1, [rng.standard_normal((1, 3)) for _ in range(2)],
                                        is_segment_level=True)
        seqs_a, seqs_b = align_layers(frame_layer, segment_layer, Fraction(1), Fraction(1))

        assert [s.shape[0] for s in seqs_a] == [4, 6]
        assert [s.shape[0] for s in seqs_b] == [4, 6]
