# coding: utf-8

# # Off-policy targets on a toy rollout
#
# A five-step rollout where the behaviour policy and the current policy
# disagree. We compute truncated importance weights and the corrected value
# targets, then compare with plain n-step returns.

# In[1]:

import numpy as np

from attnrl.vtrace import Trajectory, truncated_is_weights, vtrace_targets

rng = np.random.default_rng(0)
T, A = 5, 3


# In[2]:

# behaviour logits come from an older snapshot; target logits from the learner
behaviour = rng.normal(size=(T, A))
target = behaviour + rng.normal(size=(T, A)) * 0.8
traj = Trajectory(behaviour_logits=behaviour, target_logits=target,
                  actions=rng.integers(0, A, T), rewards=np.array([0, 0, 0, 0, 1.0]),
                  dones=np.zeros(T, bool), values=np.full(T, 0.5), bootstrap_value=0.5)

rho, c = truncated_is_weights(traj, rho_bar=1.0, c_bar=1.0)
print("clipped ratios", np.round(rho, 3))


# In[3]:

out = vtrace_targets(traj, gamma=0.99, rho=rho, c=c)
print("v-trace targets", np.round(out.vs, 4))
print("pg advantages  ", np.round(out.pg_advantages, 4))


# When the two policies agree every weight is 1 and the targets reduce to
# n-step returns.

# In[4]:

same = Trajectory(behaviour, behaviour.copy(), traj.actions, traj.rewards, traj.dones,
                  traj.values, traj.bootstrap_value)
on_policy = vtrace_targets(same, 0.99)
nstep = [sum(0.99 ** (k - s) * traj.rewards[k] for k in range(s, T)) + 0.99 ** (T - s) * 0.5
         for s in range(T)]
print("on-policy", np.round(on_policy.vs, 6))
print("n-step   ", np.round(nstep, 6))
