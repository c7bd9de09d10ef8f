"""
报告导出器测试
"""

import csv

import numpy as np
import pytest
import yaml
from PIL import Image

from core.cka_engine import SimilarityMatrix
from core.dino_trainer import DinoTraceRow
from core.probing import ProbeHead, ProbeResult, WeightedSumCombiner, contribution_scores
from core.report_exporter import ReportExporter
from utils.exceptions import ExportException


@pytest.fixture
def exporter():
    """单元格 2 像素的导出器"""
    return ReportExporter(heatmap_cell_size=2, strip_height=8)


@pytest.fixture
def sample_matrix():
    """含越界值的 2×3 网格"""
    return SimilarityMatrix(
        rows=["L0", "L1"],
        cols=["L0", "L1", "E2"],
        values=np.array([[1.0, 0.5, -0.02], [0.25, 1.0000001, 0.75]]),
        meta={"model_a": "a", "model_b": "b", "passes": 1}
    )


@pytest.fixture
def sample_result():
    """两层探测结果"""
    rng = np.random.default_rng(0)
    combiner = WeightedSumCombiner.create([3, 3], output_dim=3, rng=rng)
    combiner.logits = np.array([0.2, -0.1])
    return ProbeResult(
        combiner=combiner,
        head=ProbeHead.zeros(3, 2),
        accuracy=0.875,
        majority_baseline=0.5,
        contribution=contribution_scores(combiner),
        loss_trace=[0.69, 0.5, 0.4],
        train_indices=np.arange(8),
        heldout_indices=np.arange(8, 10),
        seed=3
    )


class TestSimilarityExport:
    """测试相似度网格导出"""

    def test_export_writes_three_files(self, exporter, sample_matrix, tmp_path):
        """测试写出 similarity.csv、similarity.pgm、meta.txt"""
        paths = exporter.export_similarity(sample_matrix, tmp_path)

        assert sorted(p.name for p in tmp_path.iterdir()) == ["meta.txt", "similarity.csv", "similarity.pgm"]
        meta = yaml.safe_load(paths["meta"].read_text(encoding="utf-8"))
        assert meta["clamped_values"] == 2
        assert meta["cols"] == ["L0", "L1", "E2"]
        assert meta["passes"] == 1

    def test_csv_round_trip(self, exporter, sample_matrix, tmp_path):
        """测试 CSV 读回的数值与标签不变"""
        path = tmp_path / "similarity.csv"
        exporter.write_similarity_csv(sample_matrix, path)

        restored = ReportExporter.read_similarity_csv(path)

        assert restored.rows == sample_matrix.rows
        assert restored.cols == sample_matrix.cols
        np.testing.assert_array_equal(restored.values, sample_matrix.values)
        with open(path, encoding="utf-8") as f:
            assert next(csv.reader(f)) == ["layer", "L0", "L1", "E2"]

    def test_heatmap_is_binary_pgm(self, exporter, sample_matrix, tmp_path):
        """测试热力图为 P5 灰度图，数值线性映射并截断"""
        path = tmp_path / "similarity.pgm"
        exporter.write_heatmap_pgm(sample_matrix.values, path)

        assert path.read_bytes()[:2] == b"P5"
        with Image.open(path) as image:
            pixels = np.array(image)
        assert pixels.shape == (4, 6)
        assert pixels[0, 0] == 255
        assert pixels[0, 2] == 128
        assert pixels[0, 4] == 0
        assert pixels[2, 2] == 255

    def test_export_is_byte_reproducible(self, exporter, sample_matrix, tmp_path):
        """测试相同输入得到字节一致的文件"""
        exporter.export_similarity(sample_matrix, tmp_path / "a")
        exporter.export_similarity(sample_matrix, tmp_path / "b")
        for name in ["similarity.csv", "similarity.pgm", "meta.txt"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_read_missing_csv(self, tmp_path):
        """测试读取不存在的 CSV"""
        with pytest.raises(ExportException) as exc_info:
            ReportExporter.read_similarity_csv(tmp_path / "missing.csv")
        assert "missing.csv" in str(exc_info.value)


class TestProbeExport:
    """测试探测报告导出"""

    def test_export_probe_files(self, exporter, sample_result, tmp_path):
        """测试报告、贡献度表、条带图与损失曲线"""
        exporter.export_probe(sample_result, "toy", tmp_path, config_echo={"steps": 3})

        report = yaml.safe_load((tmp_path / "probe_report.txt").read_text(encoding="utf-8"))
        assert report["accuracy"] == 0.875
        assert report["argmax_layer"] == sample_result.argmax_layer
        assert report["num_heldout"] == 2
        assert report["config"] == {"steps": 3}
        assert report["softmax_weights"] == pytest.approx(list(sample_result.combiner.weights))

        with open(tmp_path / "contrib.csv", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        assert [int(row["layer"]) for row in rows] == [0, 1]
        for row, weight, norm in zip(rows, sample_result.combiner.weights, sample_result.projection_norms):
            assert float(row["contribution"]) == pytest.approx(weight * norm, rel=1e-12)

        with open(tmp_path / "loss_trace.csv", encoding="utf-8") as f:
            assert len(list(csv.reader(f))) == 4
        assert (tmp_path / "contrib.pgm").read_bytes()[:2] == b"P5"

    def test_contribution_strip_bars(self, exporter, tmp_path):
        """测试最大贡献度的条形占满高度"""
        path = tmp_path / "strip.pgm"
        exporter.write_contribution_strip([0.5, 1.0], path)
        with Image.open(path) as image:
            pixels = np.array(image)

        assert pixels.shape == (8, 4)
        assert int(np.count_nonzero(pixels[:, 2:])) == 16
        assert int(np.count_nonzero(pixels[:, :2])) == 8


class TestCollapseTraceExport:
    """测试坍塌曲线导出"""

    def test_header_and_rows(self, exporter, tmp_path):
        """测试表头与行数"""
        trace = [DinoTraceRow(0, 2.5, 2.7, 0.1), DinoTraceRow(1, 2.4, 2.6, 0.2)]
        path = exporter.export_collapse_trace(trace, tmp_path / "collapse_trace.csv")

        with open(path, encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["step", "loss", "mean_teacher_entropy", "teacher_sample_entropy"]
        assert rows[2] == ["1", "2.4", "2.6", "0.2"]

    def test_unwritable_target(self, exporter, tmp_path):
        """测试输出路径不可写"""
        blocker = tmp_path / "file"
        blocker.write_text("x", encoding="utf-8")
        with pytest.raises(ExportException):
            exporter.export_collapse_trace([], blocker / "collapse_trace.csv")
