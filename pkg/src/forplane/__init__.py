"""forplane: dynamic scene reconstruction on factorized orthogonal feature planes.

A 4D (space + time) radiance field is stored as multi-resolution static and
dynamic 2D feature planes fused by element-wise multiplication, decoded by a
tiny MLP, and rendered by quadrature volume rendering with occupancy-grid
empty-space skipping. Training is depth-supervised with spatiotemporal
importance sampling of pixels. Everything runs on the CPU with hand-derived
gradients.
"""

__version__ = "0.1.0"
