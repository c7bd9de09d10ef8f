"""
玩具 DINO 自蒸馏

学生网络 = 玩具编码器 → 片段均值池化 → 带偏置的线性投影头（K 个原型）；
教师网络为学生参数的指数滑动平均。教师输出经中心化与锐化后作为学生的软目标，
并在固定探测批次上记录教师平均分布的熵以观察坍塌。
"""

import time
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from core.toy_encoder import ToyEncoder, gen_sequence_corpus, make_toy_encoder
from utils.config_manager import DinoConfig
from utils.exceptions import ToyModelException, TrainingDivergenceException
from utils.log_manager import get_logger

# 教师平均分布熵低于 ln K 的该比例视为坍塌
COLLAPSE_FRACTION = 0.2


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def entropy(p: np.ndarray) -> np.ndarray:
    """沿最后一维的熵（自然对数）"""
    p = np.asarray(p, dtype=np.float64)
    return -np.sum(np.where(p > 0, p * np.log(np.clip(p, 1e-300, None)), 0.0), axis=-1)


@dataclass
class DinoParams:
    """学生或教师的全部参数"""
    encoder: ToyEncoder
    head_weight: np.ndarray
    head_bias: np.ndarray

    def forward(self, x: np.ndarray) -> Dict[str, object]:
        """x: B×T×D₀，返回各层输出、池化向量与 logits"""
        outputs = self.encoder.forward(x)
        pooled = outputs[-1].mean(axis=1)
        logits = pooled @ self.head_weight + self.head_bias
        return {"outputs": outputs, "pooled": pooled, "logits": logits}

    def backward(self, x: np.ndarray, cache: Dict[str, object],
                 d_logits: np.ndarray) -> "DinoParams":
        """由 logits 梯度反传，返回与参数同形状的梯度"""
        outputs = cache["outputs"]
        pooled = cache["pooled"]
        d_pooled = d_logits @ self.head_weight.T
        frames = outputs[-1].shape[1]
        d_last = np.broadcast_to(d_pooled[:, None, :] / frames, outputs[-1].shape)
        encoder_grads = self.encoder.backward(x, outputs, d_last)
        return DinoParams(
            encoder=ToyEncoder(encoder_grads, self.encoder.activation, self.encoder.seed),
            head_weight=pooled.T @ d_logits,
            head_bias=d_logits.sum(axis=0)
        )

    def arrays(self) -> List[np.ndarray]:
        """按固定顺序列出参数数组"""
        return [*self.encoder.weights, self.head_weight, self.head_bias]

    def copy(self) -> "DinoParams":
        """深拷贝"""
        return DinoParams(self.encoder.copy(), self.head_weight.copy(), self.head_bias.copy())


@dataclass
class DinoTraceRow:
    """单步坍塌指标"""
    step: int
    loss: float
    mean_entropy: float
    sample_entropy: float


@dataclass
class DinoState:
    """自蒸馏训练状态"""
    student: DinoParams
    teacher: DinoParams
    center: np.ndarray
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    teacher_momentum: float = 0.99
    center_momentum: float = 0.9
    trace: List[DinoTraceRow] = field(default_factory=list)

    def __post_init__(self):
        if self.student_temp <= 0 or self.teacher_temp <= 0:
            raise ToyModelException("温度必须 > 0")
        for name in ("teacher_momentum", "center_momentum"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ToyModelException(f"{name} 必须在 [0, 1] 之间，当前为 {value}")
        _check_same_shapes(self.student, self.teacher)
        self.center = np.asarray(self.center, dtype=np.float64)


def teacher_distribution(teacher_logits: np.ndarray, center: np.ndarray, teacher_temp: float) -> np.ndarray:
    """p_t = softmax((teacher_logits - c)/τ_t)"""
    if teacher_temp <= 0:
        raise ToyModelException("温度必须 > 0")
    return _softmax((np.asarray(teacher_logits, dtype=np.float64) - center) / teacher_temp)


def _check_same_shapes(student: DinoParams, teacher: DinoParams) -> None:
    student_shapes = [a.shape for a in student.arrays()]
    teacher_shapes = [a.shape for a in teacher.arrays()]
    if student_shapes != teacher_shapes:
        raise ToyModelException(
            "教师与学生参数形状不一致",
            details={"student": str(student_shapes), "teacher": str(teacher_shapes)}
        )


def _loss_and_grad(student_logits: np.ndarray, teacher_logits: np.ndarray, center: np.ndarray,
                   student_temp: float, teacher_temp: float) -> Tuple[float, np.ndarray]:
    if student_temp <= 0 or teacher_temp <= 0:
        raise ToyModelException("温度必须 > 0")
    student_logits = np.asarray(student_logits, dtype=np.float64)
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    if student_logits.shape != teacher_logits.shape:
        raise ToyModelException(
            f"学生与教师 logits 形状不一致: {student_logits.shape} vs {teacher_logits.shape}"
        )
    p_teacher = teacher_distribution(teacher_logits, center, teacher_temp)
    log_p_student = _log_softmax(student_logits / student_temp)
    batch = student_logits.shape[0]
    loss = float(np.mean(-np.sum(p_teacher * log_p_student, axis=-1)))
    grad = (np.exp(log_p_student) - p_teacher) / (student_temp * batch)
    return loss, grad


def dino_loss(student_logits: np.ndarray, teacher_logits: np.ndarray, state: DinoState) -> float:
    """批平均交叉熵 H(p_t, p_s)

    p_t = softmax((teacher_logits - c)/τ_t)，p_s = softmax(student_logits/τ_s)。
    """
    return _loss_and_grad(student_logits, teacher_logits, state.center,
                          state.student_temp, state.teacher_temp)[0]


def update_center(state: DinoState, teacher_batch_logits: np.ndarray) -> np.ndarray:
    """c ← m·c + (1 - m)·batch_mean(teacher_logits)"""
    teacher_batch_logits = np.asarray(teacher_batch_logits, dtype=np.float64)
    if teacher_batch_logits.ndim != 2 or teacher_batch_logits.shape[0] == 0:
        raise ToyModelException("中心更新需要非空的教师 logits 批次")
    m = state.center_momentum
    return m * state.center + (1.0 - m) * teacher_batch_logits.mean(axis=0)


def ema_update(state: DinoState) -> DinoParams:
    """θ_t ← λ·θ_t + (1 - λ)·θ_s"""
    _check_same_shapes(state.student, state.teacher)
    lam = state.teacher_momentum
    mixed = [
        lam * t + (1.0 - lam) * s
        for t, s in zip(state.teacher.arrays(), state.student.arrays())
    ]
    depth = state.teacher.encoder.depth
    return DinoParams(
        encoder=ToyEncoder(mixed[:depth], state.teacher.encoder.activation, state.teacher.encoder.seed),
        head_weight=mixed[depth],
        head_bias=mixed[depth + 1]
    )


def _random_crops(corpus: List[np.ndarray], indices: np.ndarray, crop_frames: int,
                  rng: np.random.Generator) -> np.ndarray:
    crops = []
    for index in indices:
        seq = corpus[index]
        start = int(rng.integers(0, seq.shape[0] - crop_frames + 1))
        crops.append(seq[start:start + crop_frames])
    return np.stack(crops)


def _augment(views: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """按信噪比加高斯噪声，信号功率逐片段计算"""
    power = np.mean(views ** 2, axis=(1, 2), keepdims=True)
    noise_std = np.sqrt(power / (10.0 ** (snr_db / 10.0)))
    return views + noise_std * rng.standard_normal(views.shape)


def _probe_metrics(state: DinoState, probe_batch: np.ndarray) -> Tuple[float, float]:
    logits = state.teacher.forward(probe_batch)["logits"]
    p_teacher = teacher_distribution(logits, state.center, state.teacher_temp)
    return float(entropy(p_teacher.mean(axis=0))), float(entropy(p_teacher).mean())


def is_collapsed(mean_entropy: float, num_prototypes: int) -> bool:
    """教师平均分布熵低于 0.2·ln K 即视为坍塌"""
    return bool(mean_entropy < COLLAPSE_FRACTION * np.log(num_prototypes))


def train_dino_toy(cfg: DinoConfig, seed: int = 0) -> Tuple[ToyEncoder, DinoState, List[DinoTraceRow]]:
    """在合成语料上训练玩具 DINO

    每步: 每条序列取两个随机片段并分别加噪，学生/教师前向，交叉视角蒸馏损失，
    学生梯度下降，教师 EMA 更新，中心更新，记录探测批次上的坍塌指标。
    """
    start_time = time.time()
    logger = get_logger()
    seeds = np.random.default_rng(seed).integers(0, 2 ** 32, size=4)
    corpus, _ = gen_sequence_corpus(cfg.corpus, int(seeds[0]))
    encoder = make_toy_encoder(cfg.encoder, int(seeds[1]))
    head_rng = np.random.default_rng(seeds[2])
    train_rng = np.random.default_rng(seeds[3])

    num_prototypes = cfg.num_prototypes
    student = DinoParams(
        encoder=encoder,
        head_weight=cfg.head_weight_std * head_rng.standard_normal((encoder.output_dim, num_prototypes)),
        head_bias=cfg.head_bias_std * head_rng.standard_normal(num_prototypes)
    )
    state = DinoState(
        student=student,
        teacher=student.copy(),
        center=np.zeros(num_prototypes),
        student_temp=cfg.student_temp,
        teacher_temp=cfg.effective_teacher_temp,
        teacher_momentum=cfg.teacher_momentum,
        center_momentum=cfg.center_momentum
    )
    probe_size = min(cfg.probe_batch_size, len(corpus))
    probe_batch = np.stack([seq[:cfg.crop_frames] for seq in corpus[:probe_size]])

    logger.log_operation(
        "DINO_TRAIN_START",
        steps=cfg.steps,
        use_centering=cfg.use_centering,
        use_sharpening=cfg.use_sharpening,
        teacher_temp=state.teacher_temp,
        seed=seed
    )

    for step in range(cfg.steps):
        indices = train_rng.choice(len(corpus), size=cfg.batch_size, replace=cfg.batch_size > len(corpus))
        view_a = _augment(_random_crops(corpus, indices, cfg.crop_frames, train_rng), cfg.snr_db, train_rng)
        view_b = _augment(_random_crops(corpus, indices, cfg.crop_frames, train_rng), cfg.snr_db, train_rng)

        student_a = state.student.forward(view_a)
        student_b = state.student.forward(view_b)
        teacher_a = state.teacher.forward(view_a)["logits"]
        teacher_b = state.teacher.forward(view_b)["logits"]
        teacher_batch = np.concatenate([teacher_a, teacher_b], axis=0)

        if step == 0 and cfg.use_centering and cfg.center_init == "first_batch":
            state.center = teacher_batch.mean(axis=0)

        # 交叉视角: 教师看 a 指导学生 b，反之亦然
        loss_b, grad_b = _loss_and_grad(student_b["logits"], teacher_a, state.center,
                                        state.student_temp, state.teacher_temp)
        loss_a, grad_a = _loss_and_grad(student_a["logits"], teacher_b, state.center,
                                        state.student_temp, state.teacher_temp)
        loss = 0.5 * (loss_a + loss_b)
        if not np.isfinite(loss):
            raise TrainingDivergenceException(
                f"DINO 训练在第 {step} 步出现非有限损失", trainer="dino", step=step
            )

        grads_a = state.student.backward(view_a, student_a, 0.5 * grad_a)
        grads_b = state.student.backward(view_b, student_b, 0.5 * grad_b)
        for param, g_a, g_b in zip(state.student.arrays(), grads_a.arrays(), grads_b.arrays()):
            param -= cfg.learning_rate * (g_a + g_b)

        state.teacher = ema_update(state)
        if cfg.use_centering:
            state.center = update_center(state, teacher_batch)

        mean_entropy, sample_entropy = _probe_metrics(state, probe_batch)
        state.trace.append(DinoTraceRow(step, loss, mean_entropy, sample_entropy))

    final_entropy = state.trace[-1].mean_entropy if state.trace else None
    logger.log_performance(
        "DINO_TRAIN_DONE",
        duration=time.time() - start_time,
        final_entropy=final_entropy,
        collapsed=is_collapsed(final_entropy, num_prototypes) if final_entropy is not None else None
    )
    return state.student.encoder, state, state.trace
