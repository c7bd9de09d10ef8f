"""
数据模型定义

使用 Pydantic 定义落盘清单、探测报告和运行配置等结构化数据模型。
"""

from pydantic import BaseModel, Field, field_validator
from typing import Dict, List, Optional

from utils.config_manager import AppConfig


SUBCOMMANDS = ("cka", "selfsim", "probe", "toygen", "dino-demo")


class LayerRecord(BaseModel):
    """清单中的单层记录"""
    layer_id: int = Field(..., description="层编号（从 0 开始）")
    dim: int = Field(..., description="特征维度 D")
    is_segment_level: bool = Field(default=False, description="是否为段级层（每条序列一个向量）")
    data_file: str = Field(..., description="相对清单目录的数据文件名")
    frame_counts: List[int] = Field(..., description="每条序列的帧数")

    @field_validator('dim')
    @classmethod
    def validate_dim(cls, v: int) -> int:
        """验证维度"""
        if v < 1:
            raise ValueError("dim 必须 >= 1")
        return v

    @field_validator('frame_counts')
    @classmethod
    def validate_frame_counts(cls, v: List[int]) -> List[int]:
        """验证帧数"""
        if any(count < 1 for count in v):
            raise ValueError("每条序列的帧数必须 >= 1")
        return v


class Manifest(BaseModel):
    """激活值集合清单"""
    format_version: int = Field(..., description="清单格式版本")
    model_name: str = Field(..., description="模型名称")
    frame_hop: str = Field(..., description="帧率（单位时间帧数，相对尺度），形如 '2' 或 '3/2'")
    utterance_ids: List[str] = Field(default_factory=list, description="与序列顺序对齐的语句 ID")
    layers: List[LayerRecord] = Field(..., description="逐层记录")


class ProbeReport(BaseModel):
    """探测结果报告"""
    model_name: str = Field(..., description="被探测的模型")
    accuracy: float = Field(..., description="留出集准确率")
    majority_baseline: float = Field(..., description="多数类基线准确率")
    argmax_layer: int = Field(..., description="贡献度最大的层")
    use_projections: bool = Field(..., description="是否使用逐层投影")
    softmax_weights: List[float] = Field(..., description="原始层权重 w_l = softmax(α)_l")
    contribution: List[float] = Field(..., description="贡献度 w_l·‖A_l‖_F")
    projection_norms: List[float] = Field(..., description="‖A_l‖_F")
    num_train: int = Field(..., description="训练集语句数")
    num_heldout: int = Field(..., description="留出集语句数")
    final_loss: Optional[float] = Field(default=None, description="最后一步训练损失")
    seed: int = Field(..., description="随机种子")
    config: Dict = Field(default_factory=dict, description="训练配置回显")


class RunConfig(BaseModel):
    """单次命令行运行的完整配置"""
    subcommand: str = Field(..., description="子命令")
    inputs: Dict[str, str] = Field(default_factory=dict, description="输入路径")
    out_dir: str = Field(..., description="输出目录")
    seed: int = Field(default=0, description="运行种子")
    app: AppConfig = Field(default_factory=AppConfig, description="生效的应用配置")

    @field_validator('subcommand')
    @classmethod
    def validate_subcommand(cls, v: str) -> str:
        """验证子命令"""
        if v not in SUBCOMMANDS:
            raise ValueError(f"不支持的子命令: {v}，支持: {', '.join(SUBCOMMANDS)}")
        return v

    @field_validator('seed')
    @classmethod
    def validate_seed(cls, v: int) -> int:
        """验证种子为 u64"""
        if v < 0 or v >= 2 ** 64:
            raise ValueError("seed 必须在 [0, 2^64) 之间")
        return v
