import asyncio
import statistics
import sys
import time

from src.runner import run_mission
from src.schemas import RunConfig


def benchmark(scenario: str, runs: int = 5, avoidance: bool = True):
    print(f"--- Benchmarking {scenario} ({runs} runs, avoidance={'on' if avoidance else 'off'}) ---")

    latencies = []
    sim_seconds = []

    print("\nRunning missions...")
    for i in range(runs):
        config = RunConfig(scenario=scenario, seed=i + 1, avoidance=avoidance)
        start = time.time()
        report = asyncio.run(run_mission(config))
        end = time.time()

        duration = end - start
        latencies.append(duration)
        sim_seconds.append(report.duration)
        print(f"Run {i+1}: {duration:.4f}s wall, {report.duration:.2f}s simulated, "
              f"{report.outcome.value}, gates={report.gates_passed}")

    print("\n--- Statistics ---")
    print(f"Median: {statistics.median(latencies):.4f}s")
    print(f"Mean:   {statistics.mean(latencies):.4f}s")
    if len(latencies) > 1:
        print(f"Stdev:  {statistics.stdev(latencies):.4f}s")
    print(f"Real-time factor: {sum(sim_seconds) / sum(latencies):.2f}x")

    print("\nNote: Run with SERVOSIM_LOG_LEVEL=INFO for the per-stage timing breakdown (render_and_link, guidance, flight).")

if __name__ == "__main__":
    scenario = sys.argv[1] if len(sys.argv) > 1 else "paper_fig3"
    num_runs = int(sys.argv[2]) if len(sys.argv) > 2 else 5
    avoidance = not (len(sys.argv) > 3 and sys.argv[3] == "--no-avoidance")
    benchmark(scenario, num_runs, avoidance)
