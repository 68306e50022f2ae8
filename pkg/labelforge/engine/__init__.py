"""
Label engine: image masks to Lidar pseudo-labels
"""
