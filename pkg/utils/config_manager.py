"""配置管理"""

from pydantic import BaseModel, Field, field_validator
from typing import Optional
from pathlib import Path
import math
import yaml
import os
import re


VALID_ACTIVATIONS = ["identity", "tanh", "relu"]
VALID_INITS = ["orthogonal", "gaussian", "smooth"]
VALID_LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]


class CkaConfig(BaseModel):
    """CKA 计算配置"""
    batch_size_utterances: int = Field(default=4, description="每个小批次包含的语句数")
    shuffle_seed: Optional[int] = Field(default=None, description="批次顺序的随机种子，为空时按语料顺序")
    min_examples_per_batch: int = Field(default=4, description="每个批次的最少帧数")
    hop_ratio_tolerance: float = Field(default=0.1, description="帧率比取整时允许的相对偏差")
    include_segment_level: bool = Field(default=True, description="相似度网格是否包含段级层")

    @field_validator('batch_size_utterances')
    @classmethod
    def validate_batch_size(cls, v: int) -> int:
        """验证批次大小"""
        if v < 1:
            raise ValueError("batch_size_utterances 必须 >= 1")
        return v

    @field_validator('min_examples_per_batch')
    @classmethod
    def validate_min_examples(cls, v: int) -> int:
        """验证最少帧数（无偏 HSIC 要求 n >= 4）"""
        if v < 4:
            raise ValueError("min_examples_per_batch 必须 >= 4")
        return v

    @field_validator('hop_ratio_tolerance')
    @classmethod
    def validate_hop_tolerance(cls, v: float) -> float:
        """验证帧率比容差"""
        if v < 0.0 or v >= 0.5:
            raise ValueError("hop_ratio_tolerance 必须在 [0, 0.5) 之间")
        return v


class ProbeConfig(BaseModel):
    """加权和探测训练配置"""
    learning_rate: float = Field(default=0.2, description="梯度下降步长")
    steps: int = Field(default=400, description="迭代次数")
    use_projections: bool = Field(default=True, description="是否为每层插入可训练线性投影")
    output_dim: Optional[int] = Field(default=None, description="投影输出维度，为空时取最大层维度")
    holdout_fraction: float = Field(default=0.2, description="留出集比例")
    init_scale: float = Field(default=1.0, description="投影初始化尺度")

    @field_validator('learning_rate')
    @classmethod
    def validate_learning_rate(cls, v: float) -> float:
        """验证步长"""
        if v < 0.0 or not math.isfinite(v):
            raise ValueError("learning_rate 必须为非负有限值")
        return v

    @field_validator('steps')
    @classmethod
    def validate_steps(cls, v: int) -> int:
        """验证迭代次数"""
        if v < 0:
            raise ValueError("steps 必须 >= 0")
        return v

    @field_validator('output_dim')
    @classmethod
    def validate_output_dim(cls, v: Optional[int]) -> Optional[int]:
        """验证输出维度"""
        if v is not None and v < 1:
            raise ValueError("output_dim 必须 >= 1")
        return v

    @field_validator('holdout_fraction')
    @classmethod
    def validate_holdout(cls, v: float) -> float:
        """验证留出集比例"""
        if v <= 0.0 or v >= 1.0:
            raise ValueError("holdout_fraction 必须在 (0, 1) 之间")
        return v


class ToyEncoderConfig(BaseModel):
    """玩具编码器配置"""
    input_dim: int = Field(default=8, description="输入特征维度")
    width: int = Field(default=16, description="隐藏层宽度")
    depth: int = Field(default=6, description="层数")
    activation: str = Field(default="tanh", description="逐元素非线性")
    init: str = Field(default="orthogonal", description="初始化方式")
    gain: float = Field(default=1.0, description="权重尺度")
    bottleneck_depth: Optional[int] = Field(default=None, description="瓶颈层位置")
    bottleneck_rank: Optional[int] = Field(default=None, description="瓶颈层秩")
    smooth_shrink: int = Field(default=2, description="smooth 初始化每层截断的维度数")

    @field_validator('input_dim', 'width', 'depth')
    @classmethod
    def validate_positive(cls, v: int) -> int:
        """验证维度与层数"""
        if v < 1:
            raise ValueError("维度与层数必须 >= 1")
        return v

    @field_validator('activation')
    @classmethod
    def validate_activation(cls, v: str) -> str:
        """验证非线性名称"""
        if v not in VALID_ACTIVATIONS:
            raise ValueError(
                f"不支持的非线性: {v}，支持: {', '.join(VALID_ACTIVATIONS)}"
            )
        return v

    @field_validator('init')
    @classmethod
    def validate_init(cls, v: str) -> str:
        """验证初始化方式"""
        if v not in VALID_INITS:
            raise ValueError(
                f"不支持的初始化方式: {v}，支持: {', '.join(VALID_INITS)}"
            )
        return v

    def model_post_init(self, __context) -> None:
        """跨字段校验"""
        if (self.bottleneck_depth is None) != (self.bottleneck_rank is None):
            raise ValueError("bottleneck_depth 与 bottleneck_rank 必须同时设置")
        if self.bottleneck_depth is not None:
            if not 0 <= self.bottleneck_depth < self.depth:
                raise ValueError("bottleneck_depth 必须在 [0, depth) 之间")
            in_dim = self.input_dim if self.bottleneck_depth == 0 else self.width
            if not 1 <= self.bottleneck_rank <= min(in_dim, self.width):
                raise ValueError("bottleneck_rank 必须在 [1, min(输入维度, width)] 之间")
        if self.init == "smooth":
            if self.width != self.input_dim:
                raise ValueError("smooth 初始化要求 width == input_dim")
            if self.width - self.smooth_shrink * self.depth < 1:
                raise ValueError("smooth 初始化截断后维度不足，请减小 depth 或 smooth_shrink")


class CorpusConfig(BaseModel):
    """合成语料配置（每条序列带说话人均值与帧噪声）"""
    num_sequences: int = Field(default=40, description="序列数")
    min_frames: int = Field(default=20, description="最短帧数")
    max_frames: int = Field(default=30, description="最长帧数")
    input_dim: int = Field(default=8, description="帧特征维度")
    num_speakers: int = Field(default=8, description="说话人数")
    speaker_scale: float = Field(default=1.0, description="说话人均值尺度")
    noise_std: float = Field(default=0.5, description="帧噪声标准差")

    @field_validator('num_sequences', 'min_frames', 'max_frames', 'input_dim', 'num_speakers')
    @classmethod
    def validate_positive(cls, v: int) -> int:
        """验证计数字段"""
        if v < 1:
            raise ValueError("计数字段必须 >= 1")
        return v

    def model_post_init(self, __context) -> None:
        """跨字段校验"""
        if self.min_frames > self.max_frames:
            raise ValueError("min_frames 不能大于 max_frames")


class ProbeDatasetConfig(BaseModel):
    """植入信号的探测数据集配置"""
    num_layers: int = Field(default=6, description="层数 L")
    planted_layer: int = Field(default=2, description="携带标签信息的层 k")
    num_classes: int = Field(default=4, description="类别数")
    num_utterances: int = Field(default=120, description="语句数")
    num_frames: int = Field(default=16, description="每条语句帧数")
    dim: int = Field(default=8, description="每层特征维度")
    separation: float = Field(default=3.0, description="类别均值范数")
    noise_std: float = Field(default=1.0, description="帧噪声标准差")

    @field_validator('num_layers', 'num_utterances', 'num_frames', 'dim')
    @classmethod
    def validate_positive(cls, v: int) -> int:
        """验证计数字段"""
        if v < 1:
            raise ValueError("计数字段必须 >= 1")
        return v

    @field_validator('num_classes')
    @classmethod
    def validate_classes(cls, v: int) -> int:
        """验证类别数"""
        if v < 2:
            raise ValueError("num_classes 必须 >= 2")
        return v

    def model_post_init(self, __context) -> None:
        """跨字段校验"""
        if not 0 <= self.planted_layer < self.num_layers:
            raise ValueError(
                f"planted_layer 必须在 [0, {self.num_layers}) 之间，当前为 {self.planted_layer}"
            )


class AamConfig(BaseModel):
    """AAM-Softmax 配置"""
    margin: float = Field(default=0.2, description="加性角度间隔（弧度）")
    scale: float = Field(default=30.0, description="余弦缩放系数")

    @field_validator('margin')
    @classmethod
    def validate_margin(cls, v: float) -> float:
        """验证角度间隔"""
        if v < 0.0 or v >= math.pi / 2:
            raise ValueError("margin 必须在 [0, π/2) 之间")
        return v

    @field_validator('scale')
    @classmethod
    def validate_scale(cls, v: float) -> float:
        """验证缩放系数"""
        if v <= 0.0:
            raise ValueError("scale 必须 > 0")
        return v


class DinoConfig(BaseModel):
    """玩具 DINO 自蒸馏配置

    温度与动量默认值用于在玩具规模上呈现“有中心化/无中心化”的坍塌对比。
    """
    steps: int = Field(default=400, description="训练步数")
    batch_size: int = Field(default=16, description="每步采样的序列数")
    crop_frames: int = Field(default=10, description="每个片段的帧数")
    num_prototypes: int = Field(default=16, description="投影头输出维度 K")
    learning_rate: float = Field(default=0.02, description="学生网络步长")
    student_temp: float = Field(default=0.1, description="学生温度 τ_s")
    teacher_temp: float = Field(default=0.04, description="教师温度 τ_t")
    center_momentum: float = Field(default=0.9, description="中心动量 m")
    teacher_momentum: float = Field(default=0.99, description="教师 EMA 动量 λ")
    use_centering: bool = Field(default=True, description="是否启用中心化")
    use_sharpening: bool = Field(default=True, description="是否启用锐化（关闭时 τ_t = τ_s）")
    center_init: str = Field(default="first_batch", description="中心初始化方式")
    snr_db: float = Field(default=10.0, description="加性高斯噪声增强的信噪比")
    head_weight_std: float = Field(default=0.01, description="投影头权重初始化标准差")
    head_bias_std: float = Field(default=3.0, description="投影头偏置初始化标准差")
    probe_batch_size: int = Field(default=32, description="坍塌指标使用的探测批次大小")
    encoder: ToyEncoderConfig = Field(
        default_factory=lambda: ToyEncoderConfig(depth=3),
        description="学生/教师共享的编码器结构"
    )
    corpus: CorpusConfig = Field(default_factory=CorpusConfig, description="训练语料")

    @field_validator('student_temp', 'teacher_temp')
    @classmethod
    def validate_temperature(cls, v: float) -> float:
        """验证温度"""
        if v <= 0.0:
            raise ValueError("温度必须 > 0")
        return v

    @field_validator('center_momentum', 'teacher_momentum')
    @classmethod
    def validate_momentum(cls, v: float) -> float:
        """验证动量"""
        if v < 0.0 or v > 1.0:
            raise ValueError("动量必须在 [0, 1] 之间")
        return v

    @field_validator('center_init')
    @classmethod
    def validate_center_init(cls, v: str) -> str:
        """验证中心初始化方式"""
        if v not in ("zeros", "first_batch"):
            raise ValueError("center_init 只支持 zeros 或 first_batch")
        return v

    @field_validator('steps', 'batch_size', 'crop_frames', 'num_prototypes', 'probe_batch_size')
    @classmethod
    def validate_positive(cls, v: int) -> int:
        """验证计数字段"""
        if v < 1:
            raise ValueError("计数字段必须 >= 1")
        return v

    def model_post_init(self, __context) -> None:
        """跨字段校验"""
        if self.crop_frames > self.corpus.min_frames:
            raise ValueError("crop_frames 不能超过语料最短帧数")
        if self.encoder.input_dim != self.corpus.input_dim:
            raise ValueError("编码器 input_dim 必须与语料 input_dim 一致")

    @property
    def effective_teacher_temp(self) -> float:
        """关闭锐化时教师与学生同温"""
        return self.teacher_temp if self.use_sharpening else self.student_temp


class SupervisedConfig(BaseModel):
    """AAM-Softmax 有监督玩具训练配置"""
    steps: int = Field(default=200, description="训练步数")
    learning_rate: float = Field(default=0.01, description="梯度下降步长")
    aam: AamConfig = Field(default_factory=AamConfig, description="AAM-Softmax 参数")
    encoder: ToyEncoderConfig = Field(
        default_factory=lambda: ToyEncoderConfig(depth=3),
        description="编码器结构"
    )
    corpus: CorpusConfig = Field(
        default_factory=lambda: CorpusConfig(num_speakers=4, speaker_scale=2.0),
        description="带说话人标签的训练语料"
    )

    @field_validator('steps')
    @classmethod
    def validate_steps(cls, v: int) -> int:
        """验证训练步数"""
        if v < 0:
            raise ValueError("steps 必须 >= 0")
        return v

    @field_validator('learning_rate')
    @classmethod
    def validate_learning_rate(cls, v: float) -> float:
        """验证步长"""
        if v < 0.0:
            raise ValueError("learning_rate 必须 >= 0")
        return v

    def model_post_init(self, __context) -> None:
        """跨字段校验"""
        if self.encoder.input_dim != self.corpus.input_dim:
            raise ValueError("编码器 input_dim 必须与语料 input_dim 一致")
        if self.corpus.num_speakers < 2:
            raise ValueError("有监督训练至少需要 2 个说话人")


class PerformanceConfig(BaseModel):
    """性能配置"""
    max_workers: int = Field(default=1, description="相似度网格并行线程数")
    max_memory_mb: int = Field(default=1024, description="Gram 矩阵内存预算(MB)")

    @field_validator('max_workers')
    @classmethod
    def validate_max_workers(cls, v: int) -> int:
        """验证并行线程数"""
        if v < 1 or v > 32:
            raise ValueError("max_workers 必须在 1-32 之间")
        return v

    @field_validator('max_memory_mb')
    @classmethod
    def validate_max_memory(cls, v: int) -> int:
        """验证内存预算"""
        if v < 16 or v > 65536:
            raise ValueError("max_memory_mb 必须在 16-65536 之间")
        return v


class LoggingConfig(BaseModel):
    """日志配置"""
    log_dir: str = Field(default="logs", description="日志目录")
    console_level: str = Field(default="ERROR", description="控制台日志级别")

    @field_validator('console_level')
    @classmethod
    def validate_level(cls, v: str) -> str:
        """验证日志级别"""
        if v.upper() not in VALID_LOG_LEVELS:
            raise ValueError(
                f"不支持的日志级别: {v}，支持: {', '.join(VALID_LOG_LEVELS)}"
            )
        return v.upper()


class AppConfig(BaseModel):
    """应用配置"""
    cka: CkaConfig = Field(default_factory=CkaConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    encoder: ToyEncoderConfig = Field(default_factory=ToyEncoderConfig)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    probe_dataset: ProbeDatasetConfig = Field(default_factory=ProbeDatasetConfig)
    dino: DinoConfig = Field(default_factory=DinoConfig)
    supervised: SupervisedConfig = Field(default_factory=SupervisedConfig)
    performance: PerformanceConfig = Field(default_factory=PerformanceConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    def model_post_init(self, __context) -> None:
        """模型初始化后的验证"""
        if self.encoder.input_dim != self.corpus.input_dim:
            raise ValueError("encoder.input_dim 必须与 corpus.input_dim 一致")

    @classmethod
    def load_from_file(cls, config_path: str = "config.yaml") -> "AppConfig":
        """从 YAML 文件加载配置，文件不存在时返回默认配置"""
        config_file = Path(config_path)
        if not config_file.exists():
            return cls.create_default()

        with open(config_file, 'r', encoding='utf-8') as f:
            config_data = yaml.safe_load(f) or {}

        # 处理环境变量替换
        config_data = cls._resolve_env_variables(config_data)

        return cls(**config_data)

    def save_to_file(self, config_path: str = "config.yaml") -> None:
        """保存配置到文件"""
        config_file = Path(config_path)
        config_file.parent.mkdir(parents=True, exist_ok=True)

        with open(config_file, 'w', encoding='utf-8') as f:
            yaml.safe_dump(
                self.model_dump(),
                f,
                allow_unicode=True,
                default_flow_style=False,
                sort_keys=False
            )

    @classmethod
    def create_default(cls) -> "AppConfig":
        """创建默认配置"""
        return cls()

    @staticmethod
    def _resolve_env_variables(config_data):
        """递归解析配置中的环境变量"""
        if isinstance(config_data, dict):
            return {
                key: AppConfig._resolve_env_variables(value)
                for key, value in config_data.items()
            }
        elif isinstance(config_data, list):
            return [
                AppConfig._resolve_env_variables(item)
                for item in config_data
            ]
        elif isinstance(config_data, str):
            # 匹配 ${VAR_NAME} 格式
            pattern = r'\$\{([^}]+)\}'
            matches = re.findall(pattern, config_data)

            result = config_data
            for var_name in matches:
                env_value = os.environ.get(var_name, '')
                result = result.replace(f'${{{var_name}}}', env_value)

            return result
        else:
            return config_data
