"""
报告导出器

负责将相似度网格、探测结果和坍塌曲线导出为 CSV、YAML 元数据与 PGM 灰度图。
所有输出只依赖输入数据，不写入时间戳，同样的输入得到字节一致的文件。
"""

import csv
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import yaml
from PIL import Image

from core.cka_engine import SimilarityMatrix
from core.dino_trainer import DinoTraceRow
from core.probing import ProbeResult
from utils.exceptions import ExportException
from utils.log_manager import get_logger
from utils.models import ProbeReport

PathLike = Union[str, Path]


def _plain(value):
    """numpy 标量/数组转为 YAML 可序列化的 Python 类型"""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        return value.item()
    return value


class ReportExporter:
    """报告导出器"""

    def __init__(self, heatmap_cell_size: int = 16, strip_height: int = 32):
        """初始化导出器

        Args:
            heatmap_cell_size: 热力图中每个网格单元放大后的像素边长
            strip_height: 贡献度条带图的像素高度
        """
        self.logger = get_logger()
        self.heatmap_cell_size = heatmap_cell_size
        self.strip_height = strip_height

    def export_similarity(self, matrix: SimilarityMatrix, out_dir: PathLike) -> Dict[str, Path]:
        """导出 similarity.csv、similarity.pgm 与 meta.txt"""
        out = Path(out_dir)
        paths = {
            "csv": out / "similarity.csv",
            "pgm": out / "similarity.pgm",
            "meta": out / "meta.txt",
        }
        self.write_similarity_csv(matrix, paths["csv"])
        clamped = self.write_heatmap_pgm(matrix.values, paths["pgm"])
        meta = dict(matrix.meta)
        meta["rows"] = list(matrix.rows)
        meta["cols"] = list(matrix.cols)
        meta["clamped_values"] = clamped
        self.write_meta(meta, paths["meta"])
        self.logger.log_operation("export_similarity_success", output_dir=str(out), clamped=clamped)
        return paths

    def write_similarity_csv(self, matrix: SimilarityMatrix, output_path: PathLike) -> None:
        """带行列表头的 CSV，数值用 repr 保证可无损读回"""
        try:
            output_file = Path(output_path)
            output_file.parent.mkdir(parents=True, exist_ok=True)
            with open(output_file, 'w', encoding='utf-8', newline='') as f:
                writer = csv.writer(f, lineterminator='\n')
                writer.writerow(["layer", *matrix.cols])
                for label, row in zip(matrix.rows, matrix.values):
                    writer.writerow([label, *(repr(float(v)) for v in row)])
        except OSError as e:
            self.logger.log_error(e, {"operation": "write_similarity_csv", "output_path": str(output_path)})
            raise ExportException(f"CSV 导出失败: {e}", export_format="csv", output_path=str(output_path))

    @staticmethod
    def read_similarity_csv(input_path: PathLike) -> SimilarityMatrix:
        """读回 write_similarity_csv 写出的网格"""
        try:
            with open(input_path, 'r', encoding='utf-8', newline='') as f:
                rows = list(csv.reader(f))
        except OSError as e:
            raise ExportException(f"CSV 读取失败: {e}", export_format="csv", output_path=str(input_path))
        if not rows or len(rows[0]) < 2:
            raise ExportException("CSV 缺少表头", export_format="csv", output_path=str(input_path))
        cols = rows[0][1:]
        labels = [row[0] for row in rows[1:]]
        values = np.array([[float(v) for v in row[1:]] for row in rows[1:]], dtype=np.float64)
        return SimilarityMatrix(rows=labels, cols=cols, values=values.reshape(len(labels), len(cols)))

    def write_heatmap_pgm(self, values: np.ndarray, output_path: PathLike) -> int:
        """8 位灰度 PGM: [0, 1] 线性映射到 [0, 255]，越界值截断

        Returns:
            被截断的数值个数
        """
        values = np.asarray(values, dtype=np.float64)
        clamped = int(np.count_nonzero((values < 0.0) | (values > 1.0)))
        pixels = np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
        cell = self.heatmap_cell_size
        pixels = np.kron(pixels, np.ones((cell, cell), dtype=np.uint8))
        self._save_pgm(pixels, output_path)
        return clamped

    def write_contribution_strip(self, contribution: Sequence[float], output_path: PathLike) -> None:
        """逐层贡献度条带图，每层一根白色竖条，高度按最大贡献度归一化"""
        values = np.asarray(contribution, dtype=np.float64)
        peak = float(values.max()) if values.size and values.max() > 0 else 1.0
        cell, height = self.heatmap_cell_size, self.strip_height
        pixels = np.zeros((height, cell * values.size), dtype=np.uint8)
        for index, value in enumerate(values):
            bar = int(round(max(value, 0.0) / peak * height))
            if bar:
                pixels[height - bar:, index * cell:(index + 1) * cell] = 255
        self._save_pgm(pixels, output_path)

    def _save_pgm(self, pixels: np.ndarray, output_path: PathLike) -> None:
        try:
            output_file = Path(output_path)
            output_file.parent.mkdir(parents=True, exist_ok=True)
            # Pillow 的 PPM 编码器对 L 模式写出二进制 PGM (P5)
            Image.fromarray(pixels).save(output_file, format="PPM")
        except (OSError, ValueError) as e:
            self.logger.log_error(e, {"operation": "save_pgm", "output_path": str(output_path)})
            raise ExportException(f"PGM 导出失败: {e}", export_format="pgm", output_path=str(output_path))

    def write_meta(self, meta: Dict, output_path: PathLike) -> None:
        """YAML 元数据侧车文件"""
        try:
            output_file = Path(output_path)
            output_file.parent.mkdir(parents=True, exist_ok=True)
            with open(output_file, 'w', encoding='utf-8') as f:
                yaml.safe_dump(_plain(meta), f, allow_unicode=True, sort_keys=False)
        except (OSError, yaml.YAMLError) as e:
            self.logger.log_error(e, {"operation": "write_meta", "output_path": str(output_path)})
            raise ExportException(f"元数据导出失败: {e}", export_format="yaml", output_path=str(output_path))

    def build_probe_report(self, result: ProbeResult, model_name: str,
                           config_echo: Optional[Dict] = None) -> ProbeReport:
        """由训练结果构造报告模型"""
        return ProbeReport(
            model_name=model_name,
            accuracy=float(result.accuracy),
            majority_baseline=float(result.majority_baseline),
            argmax_layer=result.argmax_layer,
            use_projections=result.combiner.projections is not None,
            softmax_weights=[float(w) for w in result.combiner.weights],
            contribution=[float(c) for c in result.contribution],
            projection_norms=result.projection_norms,
            num_train=int(result.train_indices.size),
            num_heldout=int(result.heldout_indices.size),
            final_loss=result.loss_trace[-1] if result.loss_trace else None,
            seed=result.seed,
            config=_plain(config_echo or {})
        )

    def export_probe(self, result: ProbeResult, model_name: str, out_dir: PathLike,
                     config_echo: Optional[Dict] = None) -> Dict[str, Path]:
        """导出 probe_report.txt、contrib.csv、contrib.pgm 与 loss_trace.csv"""
        out = Path(out_dir)
        paths = {
            "report": out / "probe_report.txt",
            "contrib": out / "contrib.csv",
            "strip": out / "contrib.pgm",
            "loss": out / "loss_trace.csv",
        }
        report = self.build_probe_report(result, model_name, config_echo)
        self.write_meta(report.model_dump(), paths["report"])

        weights = report.softmax_weights
        self._write_rows(
            paths["contrib"],
            ["layer", "softmax_weight", "projection_norm", "contribution"],
            [[index, repr(w), repr(n), repr(c)] for index, (w, n, c) in enumerate(
                zip(weights, report.projection_norms, report.contribution))]
        )
        self.write_contribution_strip(report.contribution, paths["strip"])
        self._write_rows(
            paths["loss"], ["step", "loss"],
            [[step, repr(float(loss))] for step, loss in enumerate(result.loss_trace)]
        )
        self.logger.log_operation("export_probe_success", output_dir=str(out),
                                  argmax_layer=report.argmax_layer)
        return paths

    def export_collapse_trace(self, trace: List[DinoTraceRow], output_path: PathLike) -> Path:
        """导出 collapse_trace.csv"""
        self._write_rows(
            output_path,
            ["step", "loss", "mean_teacher_entropy", "teacher_sample_entropy"],
            [[row.step, repr(float(row.loss)), repr(float(row.mean_entropy)),
              repr(float(row.sample_entropy))] for row in trace]
        )
        return Path(output_path)

    def _write_rows(self, output_path: PathLike, header: List[str], rows: List[List]) -> None:
        try:
            output_file = Path(output_path)
            output_file.parent.mkdir(parents=True, exist_ok=True)
            with open(output_file, 'w', encoding='utf-8', newline='') as f:
                writer = csv.writer(f, lineterminator='\n')
                writer.writerow(header)
                writer.writerows(rows)
        except OSError as e:
            self.logger.log_error(e, {"operation": "write_csv", "output_path": str(output_path)})
            raise ExportException(f"CSV 导出失败: {e}", export_format="csv", output_path=str(output_path))

