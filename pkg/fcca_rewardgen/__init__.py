""" LLM-guided reward design for multi-agent formation control with collision avoidance

Provides the following modules:
+ formation: normalized-Laplacian shape descriptors and the formation error
+ world: the 2D multi-agent simulator and its environment presets
+ rewarddsl: the reward program language (parser, validator, evaluator)
+ nn: dense networks, the policy and value architectures, Adam, checkpoints
+ ppo: centralized-training PPO with a shared reward
+ evaluation: episode metrics and evaluation reports
+ backend, llm_loop: chat backends and the reward initialization/tuning loop
+ config, plot, util: run configuration, plots, and the command line

"""
