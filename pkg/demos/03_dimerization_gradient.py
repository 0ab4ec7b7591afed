"""Full gradient of the integrated dimerization flux, hybrid against likelihood ratio.

The network has transcription, translation, protein dimerization and three
decays.  The quantity of interest is the expected number of dimerization
events up to t = 5, a time integral of that reaction's rate.  One hybrid run
returns all six partial derivatives; they are compared with the likelihood
ratio estimator at the same sample count and with exact values from the
master equation.  Takes about half a minute.

    python3 demos/03_dimerization_gradient.py
"""
from ctmcsens import flux_functional, hybrid_estimate, load_model, lr_cv_estimate

# exact values from ctmcsens.oracle.functional_sensitivity on a verified box
EXACT = (0.56803674, 11.383078, 3387.9942, -4.5216716, -55.725658, 0.0)

model = load_model("dimerization")
ps = model.parameter_set("flux")
net = model.net
dimerization = [r.name for r in net.reactions].index("dimerization")
f = flux_functional(net, dimerization, 0.0, ps.time)
n = 4000

# sample allocation is tuned for the dimerization rate constant, the largest component
hy = hybrid_estimate(net, ps.theta, f, ps.x0, exempt=model.exempt, n=n, alloc_index=2).estimate
lr = lr_cv_estimate(net, ps.theta, f, ps.x0, n)

print(f"{'parameter':<10}{'exact':>12}{'hybrid':>24}{'LR + CV':>24}")
for i, name in enumerate(net.param_names):
    print(f"{name:<10}{EXACT[i]:12.5g}{hy.mean[i]:14.5g} +/- {hy.halfwidth[i]:<7.3g}"
          f"{lr.mean[i]:14.5g} +/- {lr.halfwidth[i]:<7.3g}")
print("\nAt equal sample counts the hybrid intervals are several times narrower.")
