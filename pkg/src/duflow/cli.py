"""Command-line entry point.

Subcommands cover the whole pipeline: gen-data, train, eval, viz,
check-grad, info. Machine-readable `key=value` lines go to stdout; human
prose goes to stderr. Exit codes: 0 success, 1 user error (bad flags,
missing files, malformed config), 2 internal error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .errors import DuflowError


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="duflow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--sprites", type=int, default=3)
    g.add_argument("--max-disp", type=float, default=4.0)
    g.add_argument("--background", default="noise", choices=["noise", "checker", "gradient"])

    t = sub.add_parser("train", help="run the two-stage training schedule")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")

    e = sub.add_parser("eval", help="evaluate a checkpoint (or stored .flo predictions)")
    e.add_argument("--checkpoint")
    e.add_argument("--pred", help="directory of NNNNN_flow.flo predictions instead of a checkpoint")
    e.add_argument("--data", required=True)

    v = sub.add_parser("viz", help="render a .flo file on the flow color wheel")
    v.add_argument("--flo", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--max-magnitude", type=float)

    c = sub.add_parser("check-grad", help="finite-difference gradient audit of every op")
    c.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("info", help="print checkpoint parameter table")
    i.add_argument("--checkpoint", required=True)
    return p


def cmd_gen_data(args) -> int:
    from .scenes import SceneSpec, write_dataset

    spec = SceneSpec(
        height=args.height,
        width=args.width,
        background=args.background,
        n_sprites=args.sprites,
        max_displacement=args.max_disp,
    )
    write_dataset(args.out, spec, count=args.count, seed=args.seed)
    print(f"out={args.out}")
    print(f"count={args.count}")
    print(f"seed={args.seed}")
    return 0


def cmd_train(args) -> int:
    from .training import parse_config, train

    config = parse_config(args.config)
    print(f"dataset={config.dataset}", file=sys.stderr)
    net, state, history, final = train(
        config, args.out, resume=args.resume, log_fn=lambda line: print(line, file=sys.stderr)
    )
    print(f"checkpoint={final}")
    print(f"steps={state.step}")
    if history.val_aee:
        print(f"val_aee={history.val_aee[-1][1]:.6f}")
    return 0


def cmd_eval(args) -> int:
    from .flowio import aee, f1_all, occlusion_iou, read_flo
    from .losses import occlusion_masks
    from .scenes import read_dataset
    from .training import predict_flow

    if bool(args.checkpoint) == bool(args.pred):
        raise DuflowError("eval needs exactly one of --checkpoint or --pred")
    items = read_dataset(args.data)
    gt_items = [it for it in items if it.flow is not None]
    if not gt_items:
        raise DuflowError(f"{args.data} carries no ground-truth flow to evaluate against")

    net = None
    if args.checkpoint:
        from .network import load_network

        net = load_network(args.checkpoint)

    aees, aee_nocs, f1s, ious = [], [], [], []
    for it in gt_items:
        if net is not None:
            pred = predict_flow(net, it.frame1[None], it.frame2[None])[0]
            pred_b = predict_flow(net, it.frame2[None], it.frame1[None])[0]
        else:
            path = os.path.join(args.pred, f"{it.name}_flow.flo")
            if not os.path.exists(path):
                raise DuflowError(f"missing prediction {path}")
            pred = read_flo(path)
            pred_b = None
        aees.append(aee(pred, it.flow))
        f1s.append(f1_all(pred, it.flow))
        if it.occlusion is not None:
            non_occ = 1.0 - it.occlusion
            if non_occ.sum() > 0:
                aee_nocs.append(aee(pred, it.flow, non_occ))
            if pred_b is not None:
                masks = occlusion_masks(pred[None], pred_b[None])
                ious.append(occlusion_iou(masks.occluded_f[0, 0], it.occlusion))

    print(f"pairs={len(gt_items)}")
    print(f"aee_all={np.mean(aees):.6f}")
    if aee_nocs:
        print(f"aee_noc={np.mean(aee_nocs):.6f}")
    print(f"f1_all={np.mean(f1s):.6f}")
    if ious:
        print(f"occl_iou={np.mean(ious):.6f}")
    return 0


def cmd_viz(args) -> int:
    from .flowio import flow_to_color, read_flo, write_png, write_ppm

    flow = read_flo(args.flo)
    img = flow_to_color(flow, args.max_magnitude)
    if args.out.lower().endswith(".png"):
        write_png(img, args.out)
    else:
        write_ppm(img, args.out)
    print(f"out={args.out}")
    print(f"height={img.shape[0]}")
    print(f"width={img.shape[1]}")
    return 0


def cmd_check_grad(args) -> int:
    from .gradcheck import run_gradient_audit

    results = run_gradient_audit(seed=args.seed)
    worst = 0.0
    for name, err in results:
        print(f"{name}=%.3e" % err)
        worst = max(worst, err)
    ok = worst < 1e-4
    print(f"max_rel_err={worst:.3e}")
    print(f"pass={'true' if ok else 'false'}")
    return 0 if ok else 2


def cmd_info(args) -> int:
    from .network import load_network

    net = load_network(args.checkpoint)
    print(f"width_multiplier={net.config.width_multiplier}")
    print(f"parameter_count={net.parameter_count()}")
    for name, kernel, stride, dil, cin, cout in net.layer_table():
        print(f"layer.{name}=k{kernel} s{stride} d{dil} in{cin} out{cout}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "viz": cmd_viz,
        "check-grad": cmd_check_grad,
        "info": cmd_info,
    }
    try:
        return handlers[args.command](args)
    except (DuflowError, FileNotFoundError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
