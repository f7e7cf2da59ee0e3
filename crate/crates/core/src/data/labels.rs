use autograd::{Element, Tensor};

use crate::error::{Error, Result};

/// Integer class labels for a batch, shaped `N×D×H×W` (x fastest).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    pub shape: [usize; 4],
    pub data: Vec<u16>,
}

/// 1 where the label is positive, else 0. Negative labels are rejected.
pub fn binarize<T: Copy + Into<i64>>(labels: &[T]) -> Result<Vec<u8>> {
    labels
        .iter()
        .map(|&l| match l.into() {
            v if v < 0 => Err(Error::Data(format!("negative label {v}"))),
            0 => Ok(0),
            _ => Ok(1),
        })
        .collect()
}

impl LabelBatch {
    pub fn new(shape: [usize; 4], data: Vec<u16>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || n == 0 {
            return Err(Error::Data(format!(
                "label batch {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn max_label(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Foreground mask as an `N×1×D×H×W` tensor of zeros and ones.
    pub fn binary_tensor<E: Element>(&self) -> Tensor<E> {
        let [n, d, h, w] = self.shape;
        Tensor::from_fn(
            &[n, 1, d, h, w],
            |i| {
                if self.data[i] > 0 {
                    E::one()
                } else {
                    E::zero()
                }
            },
        )
    }

    /// One-hot `N×C×D×H×W` encoding; labels must be `< num_classes`.
    pub fn one_hot<E: Element>(&self, num_classes: usize) -> Result<Tensor<E>> {
        let max = self.max_label() as usize;
        if max >= num_classes {
            return Err(Error::Data(format!("class index {max} ≥ num_classes {num_classes}")));
        }
        let [n, d, h, w] = self.shape;
        let m = d * h * w;
        let mut out = vec![E::zero(); n * num_classes * m];
        for b in 0..n {
            for v in 0..m {
                let c = self.data[b * m + v] as usize;
                out[(b * num_classes + c) * m + v] = E::one();
            }
        }
        Ok(Tensor::from_vec(&[n, num_classes, d, h, w], out)?)
    }

    /// Nearest-neighbour 2× downsample keeping the even-index voxel.
    pub fn downsample2(&self) -> Result<Self> {
        let [n, d, h, w] = self.shape;
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Data(format!(
                "label extents {:?} are not divisible by 2",
                self.spatial()
            )));
        }
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let mut out = Vec::with_capacity(n * od * oh * ow);
        for b in 0..n {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        out.push(self.data[((b * d + 2 * z) * h + 2 * y) * w + 2 * x]);
                    }
                }
            }
        }
        Self::new([n, od, oh, ow], out)
    }

    /// Level 0 is `self`; level k halves every extent k times.
    pub fn pyramid(&self, levels: usize) -> Result<Vec<Self>> {
        if levels == 0 {
            return Err(Error::Data("label pyramid needs at least one level".into()));
        }
        let div = 1usize << (levels - 1);
        if self.spatial().iter().any(|&e| e % div != 0) {
            return Err(Error::Data(format!(
                "label extents {:?} are not divisible by {div} for {levels} levels",
                self.spatial()
            )));
        }
        let mut out = vec![self.clone()];
        for _ in 1..levels {
            let next = out.last().expect("nonempty").downsample2()?;
            out.push(next);
        }
        Ok(out)
    }
}

/// `image · binarize(labels)`; the image is `N×1×D×H×W`.
pub fn gt_mask_image<E: Element>(image: &Tensor<E>, labels: &LabelBatch) -> Result<Tensor<E>> {
    let [n, d, h, w] = labels.shape;
    if image.shape() != [n, 1, d, h, w] {
        return Err(Error::Data(format!(
            "image {:?} does not align with labels {:?}",
            image.shape(),
            labels.shape
        )));
    }
    let mut out = image.clone();
    for (v, &l) in out.data_mut().iter_mut().zip(&labels.data) {
        if l == 0 {
            *v = E::zero();
        }
    }
    Ok(out)
}
