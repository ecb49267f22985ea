"""LiDAR semantic scene completion toolkit."""
