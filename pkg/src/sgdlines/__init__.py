"""Line-search analysis of SGD trajectories on small networks."""
