import argparse

from plepi_iss.commands.options import add_run_arguments, run_config
from plepi_iss.middleware.middleware import command_logging
from plepi_iss.services.pipeline_service import pipeline_service


@command_logging("burnin")
def burnin(args: argparse.Namespace) -> int:
    """
    有标注视野上的监督初始化
    """
    cfg = run_config(args)
    pipeline_service.burnin(cfg)
    return 0


@command_logging("train")
def train(args: argparse.Namespace) -> int:
    """
    PLePI 教师-学生自训练
    """
    cfg = run_config(args)
    pipeline_service.train(cfg)
    return 0


@command_logging("decode")
def decode(args: argparse.Namespace) -> int:
    """
    测试视野解码
    """
    cfg = run_config(args)
    calls = pipeline_service.decode(cfg)
    print(f"{cfg.out_dir}: {len(calls)} spot calls")
    return 0


def register(subparsers) -> None:
    add_run_arguments(subparsers.add_parser("burnin", help="burn-in 监督训练")).set_defaults(handler=burnin)
    add_run_arguments(subparsers.add_parser("train", help="自训练")).set_defaults(handler=train)
    add_run_arguments(subparsers.add_parser("decode", help="测试视野解码")).set_defaults(handler=decode)
