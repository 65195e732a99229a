"""Slice a phantom along random views, map labels back and report voxel agreement."""

import numpy as np

from mpunet.multiplanar import extract_slices, line_angles_deg, map_back, sample_plane_set
from mpunet.volume import PhantomSpec, make_phantom


def main(k=6, seed=0):
    image, label = make_phantom(PhantomSpec((32, 32, 32), (1.0, 1.0, 1.0), 3, (0.35, 0.6, 0.85),
                                            noise_sigma=0.3, seed=seed))
    ps = sample_plane_set(k, seed=seed)
    print(f"{k} views, smallest line angle {line_angles_deg(ps.vectors).min():.1f} deg")
    onehot = np.eye(label.num_classes + 1)
    for view, v in enumerate(ps.vectors):
        st = extract_slices(image, ps, view, label=label)
        back = np.argmax(map_back(onehot[st.labels], st, label), axis=-1)
        print(f"  view {view} {np.round(v, 3)}: {st.images.shape[0]} slices of "
              f"{st.images.shape[1]}x{st.images.shape[2]}, agreement "
              f"{np.mean(back == label.data):.4f}")


if __name__ == "__main__":
    main()
