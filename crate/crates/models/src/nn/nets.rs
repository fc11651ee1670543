use super::layers::{
    bilinear_up2, bilinear_up2_backward, concat_channels, global_avg_pool,
    global_avg_pool_backward, max_pool, max_pool_backward, nearest_up2, nearest_up2_backward,
    split_channels, Conv, Dense, Layer, Sequential,
};
use super::{Network, Tensor};
use crate::Result;
use rand::Rng;

/// Convolutional feature stack, global average pooling and a one-logit
/// dense head. Used for both frame (2-D) and clip (3-D) classifiers.
#[derive(Clone, Debug)]
pub struct ClassifierNet {
    pub features: Sequential,
    pub head: Dense,
}

impl ClassifierNet {
    /// `stem` average-pools height and width before the first convolution;
    /// `pool` is applied between consecutive stages.
    pub fn new<R: Rng>(
        in_channels: usize,
        widths: &[usize],
        stem: usize,
        kernel: [usize; 3],
        pool: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let mut features = Sequential::default();
        if stem > 1 {
            features = features.push(Layer::AvgPool([1, stem, stem]));
        }
        let mut prev = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            if i > 0 {
                features = features.push(Layer::MaxPool(pool));
            }
            features = features.conv_relu(&[prev, w], kernel, rng);
            prev = w;
        }
        let head = Dense::new(prev, 1, rng);
        Self { features, head }
    }
}

impl Network for ClassifierNet {
    fn forward(&self, input: &Tensor) -> Tensor {
        let f = self.features.forward(input);
        let pooled = global_avg_pool(&f);
        Tensor::from_vec([1, 1, 1, 1], self.head.forward(&pooled))
    }

    fn forward_backward(
        &mut self,
        input: &Tensor,
        loss_grad: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let (f, cache) = self.features.forward_cached(input);
        let pooled = global_avg_pool(&f);
        let logit = Tensor::from_vec([1, 1, 1, 1], self.head.forward(&pooled));
        let dlogit = loss_grad(&logit)?;
        let dpooled = self.head.backward(&pooled, &dlogit.data);
        let df = global_avg_pool_backward(&dpooled, f.shape);
        self.features.backward(cache, df, false);
        Ok(logit)
    }

    fn params(&self) -> Vec<&[f32]> {
        let mut p = self.features.params();
        p.push(&self.head.weight);
        p.push(&self.head.bias);
        p
    }

    fn params_and_grads(&mut self) -> Vec<(&mut [f32], &mut [f32])> {
        let mut p = self.features.params_and_grads();
        p.push((&mut self.head.weight, &mut self.head.grad_weight));
        p.push((&mut self.head.bias, &mut self.head.grad_bias));
        p
    }
}

/// Three-scale encoder-decoder producing a dense logit map at input
/// resolution.
///
/// The input is average-pooled by `stem`, encoded at widths `w[0]`, `w[1]`
/// and `w[2]` (bottleneck), decoded with skip concatenations, and the
/// one-channel head is bilinearly upsampled back by `stem`.
#[derive(Clone, Debug)]
pub struct UNet {
    pub stem: usize,
    pub enc1: Sequential,
    pub enc2: Sequential,
    pub bottleneck: Sequential,
    pub up1: Conv,
    pub dec2: Sequential,
    pub up2: Conv,
    pub dec1: Sequential,
    pub head: Conv,
}

const K2: [usize; 3] = [1, 3, 3];
const K1: [usize; 3] = [1, 1, 1];
const P2: [usize; 3] = [1, 2, 2];

impl UNet {
    /// Initial head bias so the untrained map predicts foreground with
    /// probability ~0.01 everywhere.
    pub const HEAD_PRIOR_BIAS: f32 = -4.595;

    pub fn new<R: Rng>(in_channels: usize, w: [usize; 3], stem: usize, rng: &mut R) -> Self {
        assert!(stem.is_power_of_two(), "stem must be a power of two");
        let enc1 = Sequential::default().conv_relu(&[in_channels, w[0], w[0]], K2, rng);
        let enc2 = Sequential::default().conv_relu(&[w[0], w[1], w[1]], K2, rng);
        let bottleneck = Sequential::default().conv_relu(&[w[1], w[2], w[2]], K2, rng);
        let up1 = Conv::new(w[2], w[1], K1, rng);
        let dec2 = Sequential::default().conv_relu(&[2 * w[1], w[1]], K2, rng);
        let up2 = Conv::new(w[1], w[0], K1, rng);
        let dec1 = Sequential::default().conv_relu(&[2 * w[0], w[0]], K2, rng);
        let mut head = Conv::new(w[0], 1, K1, rng);
        head.bias[0] = Self::HEAD_PRIOR_BIAS;
        Self {
            stem,
            enc1,
            enc2,
            bottleneck,
            up1,
            dec2,
            up2,
            dec1,
            head,
        }
    }

    fn stem_in(&self, x: &Tensor) -> Tensor {
        if self.stem > 1 {
            super::avg_pool(x, [1, self.stem, self.stem])
        } else {
            x.clone()
        }
    }

    fn stem_out(&self, mut y: Tensor) -> Tensor {
        let mut s = self.stem;
        while s > 1 {
            y = bilinear_up2(&y);
            s /= 2;
        }
        y
    }
}

impl Network for UNet {
    fn forward(&self, input: &Tensor) -> Tensor {
        let x0 = self.stem_in(input);
        let s1 = self.enc1.forward(&x0);
        let s2 = self.enc2.forward(&max_pool(&s1, P2).0);
        let b = self.bottleneck.forward(&max_pool(&s2, P2).0);
        let u1 = nearest_up2(&self.up1.forward(&b));
        let d2 = self.dec2.forward(&concat_channels(&u1, &s2));
        let u2 = nearest_up2(&self.up2.forward(&d2));
        let d1 = self.dec1.forward(&concat_channels(&u2, &s1));
        self.stem_out(self.head.forward(&d1))
    }

    fn forward_backward(
        &mut self,
        input: &Tensor,
        loss_grad: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let x0 = self.stem_in(input);
        let (s1, c_enc1) = self.enc1.forward_cached(&x0);
        let (p1, a1) = max_pool(&s1, P2);
        let (s2, c_enc2) = self.enc2.forward_cached(&p1);
        let (p2, a2) = max_pool(&s2, P2);
        let (b, c_b) = self.bottleneck.forward_cached(&p2);
        let (u1, c_up1) = self.up1.forward_cached(&b);
        let (d2, c_dec2) = self.dec2.forward_cached(&concat_channels(&nearest_up2(&u1), &s2));
        let (u2, c_up2) = self.up2.forward_cached(&d2);
        let (d1, c_dec1) = self.dec1.forward_cached(&concat_channels(&nearest_up2(&u2), &s1));
        let (h, c_head) = self.head.forward_cached(&d1);
        let logits = self.stem_out(h.clone());

        let mut dh = loss_grad(&logits)?;
        let mut s = self.stem;
        while s > 1 {
            dh = bilinear_up2_backward(&dh);
            s /= 2;
        }
        let dd1 = self.head.backward(&c_head, d1.shape, &dh, true).expect("input grad");
        let dcat1 = self.dec1.backward(c_dec1, dd1, true).expect("input grad");
        let (du2, mut ds1) = split_channels(&dcat1, u2.shape[0]);
        let du2 = nearest_up2_backward(&du2);
        let dd2 = self.up2.backward(&c_up2, d2.shape, &du2, true).expect("input grad");
        let dcat2 = self.dec2.backward(c_dec2, dd2, true).expect("input grad");
        let (du1, mut ds2) = split_channels(&dcat2, u1.shape[0]);
        let du1 = nearest_up2_backward(&du1);
        let db = self.up1.backward(&c_up1, b.shape, &du1, true).expect("input grad");
        let dp2 = self.bottleneck.backward(c_b, db, true).expect("input grad");
        ds2.add_assign(&max_pool_backward(&dp2, &a2, s2.shape));
        let dp1 = self.enc2.backward(c_enc2, ds2, true).expect("input grad");
        ds1.add_assign(&max_pool_backward(&dp1, &a1, s1.shape));
        self.enc1.backward(c_enc1, ds1, false);
        Ok(logits)
    }

    fn params(&self) -> Vec<&[f32]> {
        let mut p = self.enc1.params();
        p.extend(self.enc2.params());
        p.extend(self.bottleneck.params());
        p.extend([self.up1.weight.as_slice(), self.up1.bias.as_slice()]);
        p.extend(self.dec2.params());
        p.extend([self.up2.weight.as_slice(), self.up2.bias.as_slice()]);
        p.extend(self.dec1.params());
        p.extend([self.head.weight.as_slice(), self.head.bias.as_slice()]);
        p
    }

    fn params_and_grads(&mut self) -> Vec<(&mut [f32], &mut [f32])> {
        let mut p = self.enc1.params_and_grads();
        p.extend(self.enc2.params_and_grads());
        p.extend(self.bottleneck.params_and_grads());
        p.push((&mut self.up1.weight, &mut self.up1.grad_weight));
        p.push((&mut self.up1.bias, &mut self.up1.grad_bias));
        p.extend(self.dec2.params_and_grads());
        p.push((&mut self.up2.weight, &mut self.up2.grad_weight));
        p.push((&mut self.up2.bias, &mut self.up2.grad_bias));
        p.extend(self.dec1.params_and_grads());
        p.push((&mut self.head.weight, &mut self.head.grad_weight));
        p.push((&mut self.head.bias, &mut self.head.grad_bias));
        p
    }
}
