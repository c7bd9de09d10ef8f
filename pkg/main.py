#!/usr/bin/env python3
"""主程序入口

子命令:
    cka        两个激活值集合之间的逐层 CKA 网格
    selfsim    单个激活值集合的自相似网格
    probe      加权和探测，输出逐层贡献度
    toygen     生成玩具编码器激活值或植入信号的探测数据集
    dino-demo  玩具 DINO 坍塌对比实验
"""

import argparse
import sys
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import yaml
from pydantic import ValidationError

# 添加项目根目录到 Python 路径
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from core.actvstore import load_activation_set, load_labels, save_activation_set, save_labels
from core.cka_engine import band_averages, self_similarity, similarity_matrix
from core.dino_trainer import COLLAPSE_FRACTION, is_collapsed, train_dino_toy
from core.probing import ProbeTask, train_probe
from core.report_exporter import ReportExporter
from core.supervised_trainer import train_supervised_toy
from core.toy_encoder import encode, gen_probe_dataset, gen_sequence_corpus, make_toy_encoder
from utils.config_manager import AppConfig
from utils.exceptions import ConfigException, LayerSimException
from utils.log_manager import configure_logger
from utils.memory_manager import MemoryManager
from utils.models import RunConfig

RUN_CONFIG_NAME = "run_config.yaml"


def build_parser() -> argparse.ArgumentParser:
    """构建命令行解析器"""
    parser = argparse.ArgumentParser(
        prog="layersim",
        description="逐层表示相似度 (CKA) 与加权和探测工具"
    )
    subparsers = parser.add_subparsers(dest="subcommand", required=True)

    def add_common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--out", required=True, help="输出目录")
        sub.add_argument("--seed", type=int, default=0, help="运行种子 (u64，默认 0)")
        sub.add_argument("--config", default=None, help="YAML 配置文件，命令行参数优先")

    def add_grid_flags(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--batch-size", type=int, default=None, help="每批语句数（默认 4）")
        sub.add_argument("--shuffle-seed", type=int, default=None, help="批次顺序的随机种子")
        sub.add_argument("--min-examples", type=int, default=None, help="每批最少帧数")
        sub.add_argument("--workers", type=int, default=None, help="并行计算网格单元的线程数")
        sub.add_argument("--exclude-segment", action="store_true", help="网格中排除段级层")

    cka = subparsers.add_parser("cka", help="两个模型之间的 CKA 网格")
    cka.add_argument("--acts-a", required=True, help="模型 A 的激活值目录或清单")
    cka.add_argument("--acts-b", required=True, help="模型 B 的激活值目录或清单")
    add_grid_flags(cka)
    add_common(cka)

    selfsim = subparsers.add_parser("selfsim", help="模型内自相似网格")
    selfsim.add_argument("--acts", required=True, help="激活值目录或清单")
    add_grid_flags(selfsim)
    add_common(selfsim)

    probe = subparsers.add_parser("probe", help="加权和探测")
    probe.add_argument("--acts", required=True, help="激活值目录或清单")
    probe.add_argument("--labels", required=True, help="标签文件 (utterance_id,class)")
    probe.add_argument("--projections", choices=["on", "off"], default=None, help="是否使用逐层投影")
    probe.add_argument("--steps", type=int, default=None, help="训练步数")
    probe.add_argument("--lr", type=float, default=None, help="学习率")
    probe.add_argument("--output-dim", type=int, default=None, help="投影输出维度")
    add_common(probe)

    toygen = subparsers.add_parser("toygen", help="生成玩具激活值")
    toygen.add_argument("--kind", choices=["encoder", "planted"], default="encoder",
                        help="encoder: 编码合成语料；planted: 植入信号的探测数据集")
    toygen.add_argument("--trainer", choices=["none", "dino", "supervised"], default="none",
                        help="编码前对编码器的训练方式")
    toygen.add_argument("--include-embedding", action="store_true", help="追加段级说话人嵌入层")
    toygen.add_argument("--depth", type=int, default=None, help="编码器层数")
    toygen.add_argument("--width", type=int, default=None, help="编码器宽度")
    toygen.add_argument("--activation", default=None, help="identity / tanh / relu")
    toygen.add_argument("--init", default=None, help="orthogonal / gaussian / smooth")
    toygen.add_argument("--bottleneck-depth", type=int, default=None, help="瓶颈层位置")
    toygen.add_argument("--bottleneck-rank", type=int, default=None, help="瓶颈层秩")
    toygen.add_argument("--num-sequences", type=int, default=None, help="语料序列数")
    toygen.add_argument("--planted-layer", type=int, default=None, help="植入信号的层")
    toygen.add_argument("--frame-hop", default=None, help="帧率（相对尺度），如 1 或 3/2，默认 1")
    add_common(toygen)

    dino = subparsers.add_parser("dino-demo", help="玩具 DINO 坍塌实验")
    dino.add_argument("--no-centering", action="store_true", help="关闭中心化")
    dino.add_argument("--no-sharpening", action="store_true", help="关闭锐化 (τ_t = τ_s)")
    dino.add_argument("--steps", type=int, default=None, help="训练步数")
    dino.add_argument("--center-init", choices=["zeros", "first_batch"], default=None,
                      help="中心初始化方式")
    add_common(dino)
    return parser


def _set(data: Dict, section: str, key: str, value) -> None:
    if value is not None:
        data[section][key] = value


def build_config(args: argparse.Namespace) -> AppConfig:
    """加载配置文件并应用命令行覆盖，统一在 AppConfig 构造时校验"""
    if args.config and not Path(args.config).exists():
        raise ConfigException(f"配置文件不存在: {args.config}", config_file=args.config)
    base = AppConfig.load_from_file(args.config) if args.config else AppConfig.create_default()
    data = base.model_dump()

    if args.subcommand in ("cka", "selfsim"):
        _set(data, "cka", "batch_size_utterances", args.batch_size)
        _set(data, "cka", "shuffle_seed", args.shuffle_seed)
        _set(data, "cka", "min_examples_per_batch", args.min_examples)
        _set(data, "performance", "max_workers", args.workers)
        if args.exclude_segment:
            data["cka"]["include_segment_level"] = False
    elif args.subcommand == "probe":
        if args.projections is not None:
            data["probe"]["use_projections"] = args.projections == "on"
        _set(data, "probe", "steps", args.steps)
        _set(data, "probe", "learning_rate", args.lr)
        _set(data, "probe", "output_dim", args.output_dim)
    elif args.subcommand == "toygen":
        if args.kind == "planted":
            ignored = [flag for flag, given in (("--trainer", args.trainer != "none"),
                                                ("--frame-hop", args.frame_hop is not None),
                                                ("--include-embedding", args.include_embedding))
                       if given]
            if ignored:
                raise ConfigException(
                    f"--kind planted 不支持 {', '.join(ignored)}",
                    config_key="toygen.kind"
                )
        for key, value in (("depth", args.depth), ("width", args.width),
                           ("activation", args.activation), ("init", args.init),
                           ("bottleneck_depth", args.bottleneck_depth),
                           ("bottleneck_rank", args.bottleneck_rank)):
            _set(data, "encoder", key, value)
        _set(data, "corpus", "num_sequences", args.num_sequences)
        _set(data, "probe_dataset", "planted_layer", args.planted_layer)
    elif args.subcommand == "dino-demo":
        if args.no_centering:
            data["dino"]["use_centering"] = False
        if args.no_sharpening:
            data["dino"]["use_sharpening"] = False
        _set(data, "dino", "steps", args.steps)
        _set(data, "dino", "center_init", args.center_init)

    return AppConfig(**data)


def _derived_seeds(seed: int, count: int) -> List[int]:
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2 ** 32, size=count)]


def cmd_cka(args: argparse.Namespace, config: AppConfig) -> Dict[str, str]:
    """模型间 CKA 网格"""
    set_a = load_activation_set(args.acts_a)
    set_b = load_activation_set(args.acts_b)
    matrix = similarity_matrix(
        set_a, set_b, config.cka,
        max_workers=config.performance.max_workers,
        memory_manager=MemoryManager(config.performance.max_memory_mb)
    )
    ReportExporter().export_similarity(matrix, args.out)
    return {"acts_a": args.acts_a, "acts_b": args.acts_b}


def cmd_selfsim(args: argparse.Namespace, config: AppConfig) -> Dict[str, str]:
    """模型内自相似网格，并打印按层距离的平均相似度"""
    activation_set = load_activation_set(args.acts)
    matrix = self_similarity(
        activation_set, config.cka,
        max_workers=config.performance.max_workers,
        memory_manager=MemoryManager(config.performance.max_memory_mb)
    )
    ReportExporter().export_similarity(matrix, args.out)
    bands = " ".join(f"{value:.6f}" for value in band_averages(matrix.values))
    print(f"band_averages: {bands}")
    return {"acts": args.acts}


def cmd_probe(args: argparse.Namespace, config: AppConfig) -> Dict[str, str]:
    """加权和探测"""
    activation_set = load_activation_set(args.acts)
    labels = load_labels(args.labels, activation_set.utterance_ids)
    task = ProbeTask(
        inputs=activation_set,
        labels=labels,
        num_classes=max(int(labels.max()) + 1, 2)
    )
    result = train_probe(task, config.probe, seed=args.seed)
    ReportExporter().export_probe(
        result, activation_set.model_name, args.out,
        config_echo=config.probe.model_dump()
    )
    print(f"accuracy={result.accuracy:.4f} majority_baseline={result.majority_baseline:.4f} "
          f"argmax_layer={result.argmax_layer}")
    return {"acts": args.acts, "labels": args.labels}


def cmd_toygen(args: argparse.Namespace, config: AppConfig) -> Dict[str, str]:
    """生成激活值集合与标签文件"""
    out = Path(args.out)
    if args.kind == "planted":
        activation_set, labels = gen_probe_dataset(config.probe_dataset, seed=args.seed)
    else:
        corpus_seed, encoder_seed = _derived_seeds(args.seed, 2)
        corpus, labels = gen_sequence_corpus(config.corpus, corpus_seed)
        if args.trainer == "dino":
            if config.dino.encoder.input_dim != config.corpus.input_dim:
                raise ConfigException("dino.encoder.input_dim 必须与 corpus.input_dim 一致",
                                      config_key="dino.encoder.input_dim")
            encoder, _, _ = train_dino_toy(config.dino, seed=args.seed)
        elif args.trainer == "supervised":
            if config.supervised.encoder.input_dim != config.corpus.input_dim:
                raise ConfigException("supervised.encoder.input_dim 必须与 corpus.input_dim 一致",
                                      config_key="supervised.encoder.input_dim")
            encoder, _ = train_supervised_toy(config.supervised, seed=args.seed)
        else:
            encoder = make_toy_encoder(config.encoder, encoder_seed)
        try:
            frame_hop = Fraction(args.frame_hop or "1")
        except (ValueError, ZeroDivisionError):
            raise ConfigException(f"无法解析 --frame-hop: {args.frame_hop}", config_key="frame_hop")
        activation_set = encode(
            encoder, corpus,
            include_embedding=args.include_embedding,
            model_name=f"toy-{args.trainer}",
            frame_hop=frame_hop
        )
    save_activation_set(activation_set, out)
    save_labels(out / "labels.csv", activation_set.utterance_ids, labels)
    return {}


def cmd_dino_demo(args: argparse.Namespace, config: AppConfig) -> Dict[str, str]:
    """玩具 DINO 训练并导出坍塌曲线"""
    _, _, trace = train_dino_toy(config.dino, seed=args.seed)
    ReportExporter().export_collapse_trace(trace, Path(args.out) / "collapse_trace.csv")
    final_entropy = trace[-1].mean_entropy
    num_prototypes = config.dino.num_prototypes
    threshold = COLLAPSE_FRACTION * float(np.log(num_prototypes))
    collapsed = is_collapsed(final_entropy, num_prototypes)
    print(f"final_entropy={final_entropy:.6f} max_entropy={np.log(num_prototypes):.6f} "
          f"collapse_threshold={threshold:.6f} collapsed={str(collapsed).lower()}")
    return {}


COMMANDS = {
    "cka": cmd_cka,
    "selfsim": cmd_selfsim,
    "probe": cmd_probe,
    "toygen": cmd_toygen,
    "dino-demo": cmd_dino_demo,
}


def _write_run_config(args: argparse.Namespace, config: AppConfig, inputs: Dict[str, str]) -> None:
    run_config = RunConfig(
        subcommand=args.subcommand,
        inputs=inputs,
        out_dir=str(args.out),
        seed=args.seed,
        app=config
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / RUN_CONFIG_NAME, 'w', encoding='utf-8') as f:
        yaml.safe_dump(run_config.model_dump(), f, allow_unicode=True, sort_keys=False)


def _diagnose(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回退出码（出现诊断信息时非零）"""
    args = build_parser().parse_args(argv)

    try:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigException(f"--seed 必须在 [0, 2^64) 之间，当前为 {args.seed}", config_key="seed")
        config = build_config(args)
    except ValidationError as e:
        for error in e.errors():
            location = ".".join(str(part) for part in error["loc"]) or "config"
            _diagnose(f"{location}: {error['msg']}")
        return 2
    except (LayerSimException, ValueError, yaml.YAMLError) as e:
        _diagnose(str(e))
        return 2

    logger = configure_logger(config.logging.log_dir, config.logging.console_level)
    logger.log_operation("command_start", subcommand=args.subcommand, out=args.out, seed=args.seed)

    try:
        inputs = COMMANDS[args.subcommand](args, config)
        _write_run_config(args, config, inputs)
    except LayerSimException as e:
        logger.log_error(e, {"operation": args.subcommand})
        _diagnose(str(e))
        return 1
    except OSError as e:
        logger.log_error(e, {"operation": args.subcommand})
        _diagnose(f"I/O 错误: {e}")
        return 1

    logger.log_operation("command_done", subcommand=args.subcommand)
    return 0


if __name__ == "__main__":
    sys.exit(main())
