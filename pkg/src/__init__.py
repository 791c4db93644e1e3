# seqplace: sequence-based LiDAR place recognition
