"""Point cloud quality assessment from multi-view projections.

The pipeline: load or synthesize a colored point cloud, render horizontal
and vertical multi-view projection groups, extract per-view features with a
small CNN plus an attention block, connect the views into a graph by their
angular distance, run a graph convolutional network per direction, fuse the
levels, and regress a single quality score.  Training, k-fold evaluation and
the standard rank-correlation metrics are included, along with a CLI.
"""

__version__ = "0.1.0"
