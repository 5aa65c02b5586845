import argparse

from plepi_iss.middleware.middleware import command_logging
from plepi_iss.services.codebook_service import codebook_service
from plepi_iss.services.pipeline_service import pipeline_service


@command_logging("codebook")
def design_codebook(args: argparse.Namespace) -> int:
    """
    设计基准编码本（目标 + 诱饵条形码）
    """
    codebook = pipeline_service.design(
        args.output,
        n_targeted=args.targeted,
        n_cycles=args.cycles,
        n_trick=args.trick,
        min_dist=args.min_dist,
        trick_min_dist=args.trick_min_dist,
        seed=args.seed,
    )
    print(f"{args.output}: {len(codebook.targeted)} targeted, {len(codebook.trick)} trick, "
          f"min distance {codebook_service.min_distance(codebook)}")
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("codebook", help="设计基准编码本")
    parser.add_argument("--output", required=True, help="输出 CSV 路径")
    parser.add_argument("--targeted", type=int, default=184, help="目标条形码数量")
    parser.add_argument("--trick", type=int, default=9, help="诱饵条形码数量")
    parser.add_argument("--cycles", type=int, default=9, help="条形码长度（循环数）")
    parser.add_argument("--min-dist", type=int, default=3, help="目标条形码两两最小汉明距离")
    parser.add_argument("--trick-min-dist", type=int, default=4, help="诱饵条形码最小汉明距离")
    parser.add_argument("--seed", type=int, default=0, help="随机种子")
    parser.set_defaults(handler=design_codebook)
