import argparse

from plepi_iss.config import settings
from plepi_iss.models.models import RunConfig
from plepi_iss.services.pipeline_service import pipeline_service


def add_run_arguments(parser: argparse.ArgumentParser) -> argparse.ArgumentParser:
    """所有运行子命令共享的参数"""
    parser.add_argument("--config", help="TOML 配置文件路径")
    parser.add_argument("--seed", type=int, help="主种子")
    parser.add_argument("--threads", type=int, help=f"并行数上限 (默认 {settings.DEFAULT_THREADS})")
    parser.add_argument("--rounds", type=int, help="自训练轮数")
    parser.add_argument("--quality", choices=["lq", "hq"], help="标注质量")
    parser.add_argument("--out", help="输出目录")
    return parser


def run_config(args: argparse.Namespace) -> RunConfig:
    """由命令行参数加载 RunConfig；命令行覆盖配置文件"""
    overrides = {
        "seed": args.seed,
        "threads": args.threads,
        "rounds": args.rounds,
        "quality": args.quality,
        "out_dir": args.out,
    }
    if args.config is None and args.threads is None:
        overrides["threads"] = settings.DEFAULT_THREADS
    if args.config is None and args.out is None:
        overrides["out_dir"] = settings.OUTPUT_DIR
    return pipeline_service.load_config(args.config, overrides)
