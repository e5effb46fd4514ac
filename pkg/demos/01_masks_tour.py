"""How the masks treat a handful of hand-picked gradient components.

Each column is one parameter. The objective gradient ``g_u`` and the
constraint gradient ``g_c`` either agree in sign, disagree, or are too noisy
to tell. The AND mask only looks at signs; the focus vector also weighs how
sure we can be of those signs given the measurement noise.
"""

import numpy as np

from unlearnlab.masks import AggSpec, GradientPair, agree_prob, focus_vector, mask_and, mask_prob, update_direction

g_u = np.array([2.0, 2.0, 0.05, -1.0, 0.0])
g_c = np.array([1.0, -1.5, 0.04, -3.0, 1.0])
noise = np.array([0.01, 0.01, 1.0, 4.0, 1.0])
pair = GradientPair(g_u, g_c, noise, noise)

np.set_printoptions(precision=3, suppress=True)
print("g_u              ", g_u)
print("g_c              ", g_c)
print("noise variance   ", noise)
print("agree prob f     ", agree_prob(pair))
print("AND mask         ", mask_and(g_u, g_c).weights)
print("PROB mask p=0.3  ", mask_prob(pair, 0.3).weights)
print("PROB mask p=0.5  ", mask_prob(pair, 0.5).weights)
print("focus weights    ", focus_vector(pair).weights)

spec = AggSpec("linear", 0.05, 0.95)
print()
print("update directions with alpha=0.05, beta=0.95")
print("  no mask        ", update_direction(None, spec, g_u, g_c))
print("  AND            ", update_direction(mask_and(g_u, g_c), spec, g_u, g_c))
print("  focus          ", update_direction(focus_vector(pair), spec, g_u, g_c))

# The third column agrees in sign but is buried in noise, so AND keeps it at
# full strength while the focus vector gives it roughly half. The fourth
# column agrees too, yet its large variance again pulls f toward 1/2.
