import argparse

from plepi_iss.commands.options import add_run_arguments, run_config
from plepi_iss.middleware.middleware import command_logging
from plepi_iss.services.evaluation_service import evaluation_service
from plepi_iss.services.pipeline_service import pipeline_service


@command_logging("call-cells")
def call_cells(args: argparse.Namespace) -> int:
    """
    斑点识别 → 细胞分配
    """
    cfg = run_config(args)
    cells = pipeline_service.call_cells(cfg)
    assigned = sum(1 for c in cells if c.barcode is not None)
    print(f"{cfg.out_dir}: {assigned}/{len(cells)} cells assigned")
    return 0


@command_logging("evaluate")
def evaluate(args: argparse.Namespace) -> int:
    """
    计算评估指标
    """
    cfg = run_config(args)
    report = pipeline_service.evaluate(cfg)
    print(evaluation_service.render_table(report), end="")
    return 0


@command_logging("report")
def report(args: argparse.Namespace) -> int:
    """
    输出 JSON / 文本表 / SVG 报告
    """
    cfg = run_config(args)
    pipeline_service.report(cfg)
    return 0


@command_logging("pipeline")
def pipeline(args: argparse.Namespace) -> int:
    """
    端到端运行全部阶段
    """
    cfg = run_config(args)
    result = pipeline_service.pipeline(cfg)
    print(evaluation_service.render_table(result), end="")
    return 0


@command_logging("ablate")
def ablate(args: argparse.Namespace) -> int:
    """
    {baseline, location, full} × {lq, hq} 消融
    """
    cfg = run_config(args)
    table = pipeline_service.ablate(cfg)
    print(pipeline_service.render_ablation(table), end="")
    return 0


def register(subparsers) -> None:
    add_run_arguments(subparsers.add_parser("call-cells", help="细胞识别")).set_defaults(handler=call_cells)
    add_run_arguments(subparsers.add_parser("evaluate", help="计算指标")).set_defaults(handler=evaluate)
    add_run_arguments(subparsers.add_parser("report", help="输出报告")).set_defaults(handler=report)
    add_run_arguments(subparsers.add_parser("pipeline", help="端到端运行")).set_defaults(handler=pipeline)
    add_run_arguments(subparsers.add_parser("ablate", help="消融实验")).set_defaults(handler=ablate)
