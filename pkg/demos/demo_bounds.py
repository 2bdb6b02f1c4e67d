"""Monte-Carlo verification of the four analytic guarantees behind the index:
the quantization-error floor, the dense and sparse error concentration bounds,
and the link between overfetching and recall.

Run:  python3 demos/demo_bounds.py
"""

from hybridsearch import verify_bounds

for report in verify_bounds("all", seed=0):
    print(report.line())

print("""
Reading the lines:
  prop1  measured k-means MSE sits between the information-theoretic floor
         and twice the floor on i.i.d. Gaussian data.
  prop2  the fraction of queries whose dense score error stays below eps
         is at least the concentration bound (minus sampling slack).
  prop3  same for the sparse pruning error under the bounded two-sided model.
  prop4  per query, recall@h is at least the fraction of points whose
         stage-1 error is below half the h-vs-alpha*h score gap.
""")
