use ndarray::{Array3, ArrayView3};

/// Connected components with 26-connectivity (8 on single-slice grids).
/// Labels start at 1 in raster order of each component's first voxel;
/// `sizes[l - 1]` is the voxel count of label `l`.
pub fn label_components(mask: ArrayView3<bool>) -> (Array3<u32>, Vec<usize>) {
    let (nx, ny, nz) = mask.dim();
    let mut labels = Array3::<u32>::zeros((nx, ny, nz));
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for ((i, j, k), &m) in mask.indexed_iter() {
        if !m || labels[[i, j, k]] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        let mut count = 0;
        labels[[i, j, k]] = id;
        stack.push([i, j, k]);
        while let Some([a, b, c]) = stack.pop() {
            count += 1;
            for da in -1i64..=1 {
                for db in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (x, y, z) = (a as i64 + da, b as i64 + db, c as i64 + dc);
                        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
                            continue;
                        }
                        let p = [x as usize, y as usize, z as usize];
                        if mask[p] && labels[p] == 0 {
                            labels[p] = id;
                            stack.push(p);
                        }
                    }
                }
            }
        }
        sizes.push(count);
    }
    (labels, sizes)
}
