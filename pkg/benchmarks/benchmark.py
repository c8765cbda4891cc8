#!/usr/bin/env python
"""
Benchmark suite for G-SHDL.

This script times the stages that dominate a pipeline run: scattering,
contrastive-divergence epochs, TRW inference and the CRF objective.
"""

import argparse
import gc
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import psutil

# Add the parent directory to the path so we can import gshdl
sys.path.insert(0, str(Path(__file__).parent.parent))

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger("benchmarks")

from gshdl.conv_rbm import LayerSpec, TrainOptions, cd_k_update, random_layer
from gshdl.core import HAS_CYTHON
from gshdl.crf import CrfExample, CrfWeights, GridGraph, InferenceOptions, Potentials, loss_and_gradient, trw_infer
from gshdl.numerics import conv2d_same, rng_from_seed
from gshdl.pipeline import SyntheticSpec, generate_synthetic
from gshdl.scatternet import ScatterConfig, build_filter_bank, scatter


@contextmanager
def timer(name):
    """Context manager for timing code blocks."""
    gc.collect()  # Force garbage collection before timing
    start = time.perf_counter()
    yield
    end = time.perf_counter()
    logger.info(f"{name}: {end - start:.6f} seconds")


def summarize(name, times, out_dir, color):
    """Log timing statistics and save a histogram."""
    times = np.asarray(times)
    stats = {
        "avg_time": float(np.mean(times)),
        "median_time": float(np.median(times)),
        "std_dev": float(np.std(times)),
        "min_time": float(np.min(times)),
        "max_time": float(np.max(times)),
        "p95_time": float(np.percentile(times, 95)),
    }
    logger.info(f"{name} Benchmark Results:")
    logger.info(f"  Runs: {len(times)}")
    for key, value in stats.items():
        logger.info(f"  {key}: {value:.6f}s")

    plt.figure(figsize=(10, 6))
    plt.hist(times, bins=20, alpha=0.7, color=color)
    plt.axvline(stats["avg_time"], color="red", linestyle="dashed", linewidth=2, label=f"Mean: {stats['avg_time']:.6f}s")
    plt.axvline(stats["p95_time"], color="orange", linestyle="dashed", linewidth=2,
                label=f"95th percentile: {stats['p95_time']:.6f}s")
    plt.xlabel("Time (seconds)")
    plt.ylabel("Frequency")
    plt.title(f"{name} Time Distribution")
    plt.legend()
    plt.grid(True, alpha=0.3)
    plt.savefig(os.path.join(out_dir, f"{name.lower().replace(' ', '_')}_benchmark.png"))
    plt.close()
    return stats


def benchmark_convolution(out_dir, size=128, kernel=15, runs=50):
    """Benchmark the mirror-boundary convolution."""
    rng = rng_from_seed(0)
    image = rng.normal(size=(size, size))
    weights = rng.normal(size=(kernel, kernel))
    times = []
    for _ in range(runs):
        start = time.perf_counter()
        conv2d_same(image, weights)
        times.append(time.perf_counter() - start)
    stats = summarize("Convolution", times, out_dir, "blue")
    stats["compiled"] = HAS_CYTHON
    return stats


def benchmark_scatter(out_dir, size=64, runs=10, num_scales=2):
    """Benchmark scattering of colour images."""
    dataset = generate_synthetic(SyntheticSpec(runs, size=size))
    config = ScatterConfig(num_scales=num_scales)
    bank = build_filter_bank(config)
    times = []
    for image in dataset.images:
        start = time.perf_counter()
        scatter(image, bank, config)
        times.append(time.perf_counter() - start)
    stats = summarize("Scatter", times, out_dir, "green")
    stats["images_per_second"] = 1 / stats["avg_time"]
    return stats


def benchmark_cd_epoch(out_dir, channels=49, size=32, batch=16, filters=32, runs=10):
    """Benchmark one CD-1 minibatch update."""
    rng = rng_from_seed(1)
    layer = random_layer(LayerSpec(filters, 3), channels, seed=0)
    data = [rng.normal(size=(channels, size, size)) for _ in range(batch)]
    opts = TrainOptions(epochs=1, batch_size=batch)
    times = []
    for _ in range(runs):
        start = time.perf_counter()
        layer, _ = cd_k_update(layer, data, opts, rng)
        times.append(time.perf_counter() - start)
    return summarize("CD Update", times, out_dir, "purple")


def benchmark_inference(out_dir, size=64, labels=4, iterations=20, runs=10):
    """Benchmark TRW inference on a grid."""
    rng = rng_from_seed(2)
    unary = rng.normal(size=(size, size, labels))
    graph = GridGraph(size, size, labels)
    pairwise = np.broadcast_to(0.5 * (1 - np.eye(labels)), (graph.num_edges, labels, labels)).copy()
    potentials = Potentials(unary, pairwise)
    times = []
    for schedule in ("sequential", "parallel"):
        for _ in range(runs):
            start = time.perf_counter()
            trw_infer(potentials, iterations, 0.5, schedule)
            times.append(time.perf_counter() - start)
    return summarize("TRW Inference", times, out_dir, "teal")


def benchmark_crf_gradient(out_dir, size=48, features=16, labels=4, runs=5):
    """Benchmark one CRF loss and gradient evaluation."""
    rng = rng_from_seed(3)
    dataset = generate_synthetic(SyntheticSpec(1, size=size, num_classes=labels))
    example = CrfExample(rng.normal(size=(features, size, size)), dataset.images[0], dataset.labels[0])
    weights = CrfWeights(rng.normal(scale=0.1, size=(labels, features + 1)), np.full((labels, labels), 0.3), None)
    times = []
    for _ in range(runs):
        start = time.perf_counter()
        loss_and_gradient(weights, example, InferenceOptions(iterations=10))
        times.append(time.perf_counter() - start)
    return summarize("CRF Gradient", times, out_dir, "brown")


def benchmark_memory_usage(out_dir, sizes=(32, 64, 96, 128)):
    """Benchmark resident memory while scattering growing images."""
    process = psutil.Process()
    config = ScatterConfig(num_scales=2)
    bank = build_filter_bank(config)
    initial_memory = process.memory_info().rss / 1024 / 1024  # MB
    memory_usage = []
    for size in sizes:
        image = generate_synthetic(SyntheticSpec(1, size=size)).images[0]
        stack = scatter(image, bank, config)
        memory_usage.append(process.memory_info().rss / 1024 / 1024)
        logger.info(f"Scattered {size}x{size}: {stack.channels().nbytes / 1024 / 1024:.2f} MB of features, "
                    f"RSS {memory_usage[-1]:.2f} MB")

    plt.figure(figsize=(10, 6))
    plt.plot(sizes, memory_usage, marker="o", markersize=3)
    plt.xlabel("Image size (pixels per side)")
    plt.ylabel("Memory Usage (MB)")
    plt.title("Memory Usage During Scattering")
    plt.grid(True, alpha=0.3)
    plt.savefig(os.path.join(out_dir, "memory_usage_benchmark.png"))
    plt.close()
    return {"initial_memory": initial_memory, "final_memory": memory_usage[-1]}


def main():
    """Run the benchmarks."""
    parser = argparse.ArgumentParser(description="G-SHDL Benchmarks")
    parser.add_argument("--out", type=str, default="benchmark_results", help="Output directory")
    parser.add_argument("--runs", type=int, default=10, help="Repetitions per benchmark")
    parser.add_argument("--all", action="store_true", help="Run all benchmarks")
    parser.add_argument("--conv", action="store_true", help="Run convolution benchmark")
    parser.add_argument("--scatter", action="store_true", help="Run scattering benchmark")
    parser.add_argument("--rbm", action="store_true", help="Run CD update benchmark")
    parser.add_argument("--inference", action="store_true", help="Run TRW inference benchmark")
    parser.add_argument("--crf", action="store_true", help="Run CRF gradient benchmark")
    parser.add_argument("--memory", action="store_true", help="Run memory usage benchmark")
    args = parser.parse_args()

    out_dir = os.path.abspath(args.out)
    os.makedirs(out_dir, exist_ok=True)

    selected = [args.conv, args.scatter, args.rbm, args.inference, args.crf, args.memory]
    run_all = args.all or not any(selected)

    results = {}
    if run_all or args.conv:
        with timer("Convolution benchmark"):
            results["conv"] = benchmark_convolution(out_dir, runs=args.runs * 5)
    if run_all or args.scatter:
        with timer("Scatter benchmark"):
            results["scatter"] = benchmark_scatter(out_dir, runs=args.runs)
    if run_all or args.rbm:
        with timer("CD update benchmark"):
            results["rbm"] = benchmark_cd_epoch(out_dir, runs=args.runs)
    if run_all or args.inference:
        with timer("TRW inference benchmark"):
            results["inference"] = benchmark_inference(out_dir, runs=args.runs)
    if run_all or args.crf:
        with timer("CRF gradient benchmark"):
            results["crf"] = benchmark_crf_gradient(out_dir, runs=max(1, args.runs // 2))
    if run_all or args.memory:
        with timer("Memory usage benchmark"):
            results["memory"] = benchmark_memory_usage(out_dir)

    with open(os.path.join(out_dir, "benchmark_results.json"), "w") as f:
        json.dump(results, f, indent=2)

    timed = {name: stats["avg_time"] for name, stats in results.items() if "avg_time" in stats}
    if len(timed) > 1:
        plt.figure(figsize=(12, 8))
        x_pos = np.arange(len(timed))
        plt.bar(x_pos, list(timed.values()), align="center", alpha=0.7)
        plt.xticks(x_pos, list(timed), rotation=45)
        plt.yscale("log")
        plt.ylabel("Mean seconds per run")
        plt.title("G-SHDL Benchmark Summary")
        plt.tight_layout()
        plt.savefig(os.path.join(out_dir, "benchmark_summary.png"))
        plt.close()

    logger.info(f"Benchmarks complete, results saved to {out_dir}")


if __name__ == "__main__":
    main()
