"""Behavior-conditioned multi-agent navigation with a diversity bonus.

Modules:
    sim          -- 2D room, unicycle kinematics, lidar, events and rewards
    pedestrians  -- social-force and reciprocal velocity obstacle controllers
    nn           -- dense networks, gradients, Adam, checkpoint files
    trainer      -- rollout collection, GAE, PPO, discriminator training
    evaluation   -- test scenarios, episode metrics, action diversity
    cli          -- ``python -m divnav`` entry points
"""

__version__ = "0.1.0"
