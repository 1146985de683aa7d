"""Simulate one full experiment twice: a quiet network and a suppressing one.

Every simulated client synchronizes its clock against the counter, derives
the real per-round token, and reports through a virtual network with latency.
The counter is the same code a live deployment runs; the analysis at the end
is the same decision rule.
"""

from rollcall import sim

config = sim.default_sim_config(n_rounds=8)

for scenario, delta in ((sim.DEFENSE, 0.0), (sim.COPING, 0.35)):
    spec = sim.ScenarioSpec(
        m_clients=500,
        p_participate=0.6,
        delta=delta,
        scenario=scenario,
        seed=2024,
        config=config,
    )
    outcome = sim.run_scenario(spec)
    print(f"--- {scenario} (delta={delta}) ---")
    print(f"calibration counts: {outcome.counts}")
    print(f"execution count   : {outcome.n_star}")
    a = outcome.analysis
    print(f"z={a.z:+.3f}  confidence={a.confidence:.4f}  verdict={a.verdict}")
    print(f"events traced     : {len(outcome.event_trace)}")
    print(f"counter log lines : {len(outcome.counter_log)}  (replayable)")
    print()

# the emitted counter log is a complete, analyzable record on its own
from rollcall.counter import log_distribution, parse_log_line

events = [parse_log_line(line) for line in outcome.counter_log]
print("recount from the log alone:", log_distribution(events))
