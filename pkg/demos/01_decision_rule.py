"""Walk through the decision rule on a small worked example.

Five calibration rounds produced participation counts around 100; the
execution round produced 90. Is that drop evidence of suppression, or noise?
"""

from rollcall import stats

counts = [98, 102, 100, 96, 104]
n_star = 90

dist = stats.summarize(counts)
print(f"calibration counts : {counts}")
print(f"sample mean        : {dist.mean}")
print(f"sample stddev      : {dist.stddev:.6f}")
print(f"stable (max/min<=10): {dist.stable}")

result = stats.analyze(dist, n_star, alpha=0.05)
print(f"\nexecution count    : {n_star}")
print(f"z-score            : {result.z:.4f}")
print(f"P(z) (normal CDF)  : {result.p_of_z:.6f}")
print(f"confidence 1-P(z)  : {result.confidence:.6f}")
print(f"verdict at alpha={result.alpha}: {result.verdict}")

# the one-sided threshold behind the verdict
z_alpha = stats.normal_quantile(1 - 0.05)
print(f"\ncritical value     : z < -{z_alpha:.4f} flags suppression")

# an execution count equal to the mean is the textbook null outcome
null = stats.analyze(dist, 100)
print(f"n*=100 gives z={null.z:+.1f} -> {null.verdict}")

# a wild calibration gates the verdict no matter how extreme z is
wild = stats.summarize([10, 100, 101])
gated = stats.analyze(wild, 0)
print(f"counts [10, 100, 101] are unstable -> {gated.verdict}")
