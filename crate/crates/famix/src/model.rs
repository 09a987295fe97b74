//! The segmentation network, its shared backbone trunk and freeze policies.
//!
//! The trunk (stem through layer4) has the same structure the joint encoder
//! uses for its visual pathway, so segmentation training can start from the
//! encoder's weights the way a CLIP-initialized backbone would.

use crate::nn::{self, Conv2d, GnCache, GroupNorm, Params, SgdMomentum, Stage};
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("decoder must always stay trainable")]
    DecoderFrozen,
    #[error("unknown freeze preset `{0}`")]
    UnknownPreset(String),
    #[error("input must have {expected} channels, got {got}")]
    InputChannels { expected: usize, got: usize },
}

/// Channel widths of the trunk and decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub c4: usize,
    pub aspp_channels: usize,
    pub skip_channels: usize,
    pub head_channels: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Desk-scale widths; output stride 16 with low-level features at stride 4.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            c1: 16,
            c2: 32,
            c3: 64,
            c4: 64,
            aspp_channels: 32,
            skip_channels: 8,
            head_channels: 32,
            num_classes,
        }
    }
}

fn groups_for(c: usize) -> usize {
    for g in [4, 2, 1] {
        if c.is_multiple_of(g) {
            return g;
        }
    }
    1
}

/// conv-gn-relu x2 with a residual skip; stride/dilation sit on the first conv.
#[derive(Debug, Clone)]
pub struct ResBlock {
    stage: Stage,
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    proj: Option<(Conv2d, GroupNorm)>,
}

pub struct ResBlockCache {
    x: Array3<f64>,
    g1: GnCache,
    r1: Array3<f64>,
    g2: GnCache,
    proj_g: Option<GnCache>,
    out: Array3<f64>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut Params,
        name: &str,
        stage: Stage,
        cin: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let conv1 = Conv2d::new(
            params,
            &format!("{name}.conv1"),
            stage,
            3,
            cin,
            cout,
            stride,
            dilation,
            dilation,
            rng,
        );
        let gn1 = GroupNorm::new(params, &format!("{name}.gn1"), stage, cout, groups_for(cout));
        let conv2 = Conv2d::new(
            params,
            &format!("{name}.conv2"),
            stage,
            3,
            cout,
            cout,
            1,
            dilation,
            dilation,
            rng,
        );
        let gn2 = GroupNorm::new(params, &format!("{name}.gn2"), stage, cout, groups_for(cout));
        let proj = if cin != cout || stride != 1 {
            let conv = Conv2d::new(
                params,
                &format!("{name}.proj"),
                stage,
                1,
                cin,
                cout,
                stride,
                0,
                1,
                rng,
            );
            let gn = GroupNorm::new(
                params,
                &format!("{name}.proj_gn"),
                stage,
                cout,
                groups_for(cout),
            );
            Some((conv, gn))
        } else {
            None
        };
        Self {
            stage,
            conv1,
            gn1,
            conv2,
            gn2,
            proj,
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn forward(&self, params: &Params, x: &Array3<f64>) -> (Array3<f64>, ResBlockCache) {
        let y1 = self.conv1.forward(params, x);
        let (n1, g1) = self.gn1.forward(params, &y1);
        let r1 = nn::relu(&n1);
        let y2 = self.conv2.forward(params, &r1);
        let (n2, g2) = self.gn2.forward(params, &y2);
        let (skip, proj_g) = match &self.proj {
            Some((conv, gn)) => {
                let s = conv.forward(params, x);
                let (sn, sg) = gn.forward(params, &s);
                (sn, Some(sg))
            }
            None => (x.clone(), None),
        };
        let out = nn::relu(&(&n2 + &skip));
        let cache = ResBlockCache {
            x: x.clone(),
            g1,
            r1,
            g2,
            proj_g,
            out: out.clone(),
        };
        (out, cache)
    }

    /// Input gradient with read-only parameters; used by frozen pathways.
    pub fn backward_input(
        &self,
        params: &Params,
        cache: &ResBlockCache,
        dy: &Array3<f64>,
    ) -> Array3<f64> {
        let dsum = nn::relu_backward(&cache.out, dy);
        let dn2 = self.gn2.backward_input(params, &cache.g2, &dsum);
        let (h1, w1, _) = cache.r1.dim();
        let dr1 = self.conv2.backward_input(params, (h1, w1), &dn2);
        let dn1 = nn::relu_backward(&cache.r1, &dr1);
        let dy1 = self.gn1.backward_input(params, &cache.g1, &dn1);
        let (hx, wx, _) = cache.x.dim();
        let mut dx = self.conv1.backward_input(params, (hx, wx), &dy1);
        match (&self.proj, &cache.proj_g) {
            (Some((conv, gn)), Some(sg)) => {
                let ds = gn.backward_input(params, sg, &dsum);
                dx += &conv.backward_input(params, (hx, wx), &ds);
            }
            _ => {
                dx += &dsum;
            }
        }
        dx
    }

    pub fn backward(
        &self,
        params: &mut Params,
        cache: &ResBlockCache,
        dy: &Array3<f64>,
        trainable: bool,
    ) -> Array3<f64> {
        let dsum = nn::relu_backward(&cache.out, dy);
        let dn2 = self.gn2.backward(params, &cache.g2, &dsum, trainable);
        let dr1 = self.conv2.backward(params, &cache.r1, &dn2, trainable);
        let dn1 = nn::relu_backward(&cache.r1, &dr1);
        let dy1 = self.gn1.backward(params, &cache.g1, &dn1, trainable);
        let mut dx = self.conv1.backward(params, &cache.x, &dy1, trainable);
        match (&self.proj, &cache.proj_g) {
            (Some((conv, gn)), Some(sg)) => {
                let ds = gn.backward(params, sg, &dsum, trainable);
                dx += &conv.backward(params, &cache.x, &ds, trainable);
            }
            _ => {
                dx += &dsum;
            }
        }
        dx
    }
}

/// Backbone trunk: stem (stride 4), then four residual stages; layer4 is
/// dilated instead of strided, giving output stride 16.
#[derive(Debug, Clone)]
pub struct Trunk {
    pub config: ModelConfig,
    stem_conv1: Conv2d,
    stem_gn1: GroupNorm,
    stem_conv2: Conv2d,
    stem_gn2: GroupNorm,
    layer1: ResBlock,
    layer2: ResBlock,
    layer3: ResBlock,
    layer4_main: ResBlock,
    layer4_tail: ResBlock,
}

pub struct LowCache {
    img: Array3<f64>,
    sg1: GnCache,
    sr1: Array3<f64>,
    sg2: GnCache,
    sr2: Array3<f64>,
    l1: ResBlockCache,
}

pub struct RestCache {
    l2: ResBlockCache,
    l3: ResBlockCache,
    l4m: ResBlockCache,
    l4t: ResBlockCache,
}

impl Trunk {
    pub fn new(params: &mut Params, config: ModelConfig, rng: &mut impl Rng) -> Self {
        let stem_conv1 = Conv2d::new(
            params,
            "stem.conv1",
            Stage::Stem,
            3,
            config.in_channels,
            config.c1,
            2,
            1,
            1,
            rng,
        );
        let stem_gn1 = GroupNorm::new(params, "stem.gn1", Stage::Stem, config.c1, groups_for(config.c1));
        let stem_conv2 = Conv2d::new(
            params, "stem.conv2", Stage::Stem, 3, config.c1, config.c1, 2, 1, 1, rng,
        );
        let stem_gn2 = GroupNorm::new(params, "stem.gn2", Stage::Stem, config.c1, groups_for(config.c1));
        let layer1 = ResBlock::new(params, "layer1.0", Stage::Layer1, config.c1, config.c1, 1, 1, rng);
        let layer2 = ResBlock::new(params, "layer2.0", Stage::Layer2, config.c1, config.c2, 2, 1, rng);
        let layer3 = ResBlock::new(params, "layer3.0", Stage::Layer3, config.c2, config.c3, 2, 1, rng);
        let layer4_main = ResBlock::new(
            params,
            "layer4.0",
            Stage::Layer4Main,
            config.c3,
            config.c4,
            1,
            2,
            rng,
        );
        let layer4_tail = ResBlock::new(
            params,
            "layer4.1",
            Stage::Layer4Tail,
            config.c4,
            config.c4,
            1,
            2,
            rng,
        );
        Self {
            config,
            stem_conv1,
            stem_gn1,
            stem_conv2,
            stem_gn2,
            layer1,
            layer2,
            layer3,
            layer4_main,
            layer4_tail,
        }
    }

    /// Stem + layer1: image to low-level features at stride 4.
    pub fn forward_low(&self, params: &Params, img: &Array3<f64>) -> (Array3<f64>, LowCache) {
        let y = self.stem_conv1.forward(params, img);
        let (n1, sg1) = self.stem_gn1.forward(params, &y);
        let sr1 = nn::relu(&n1);
        let y2 = self.stem_conv2.forward(params, &sr1);
        let (n2, sg2) = self.stem_gn2.forward(params, &y2);
        let sr2 = nn::relu(&n2);
        let (f1, l1) = self.layer1.forward(params, &sr2);
        (
            f1,
            LowCache {
                img: img.clone(),
                sg1,
                sr1,
                sg2,
                sr2,
                l1,
            },
        )
    }

    /// Layer2 through layer4-tail.
    pub fn forward_rest(&self, params: &Params, f1: &Array3<f64>) -> (Array3<f64>, RestCache) {
        let (f2, l2) = self.layer2.forward(params, f1);
        let (f3, l3) = self.layer3.forward(params, &f2);
        let (f4m, l4m) = self.layer4_main.forward(params, &f3);
        let (f4t, l4t) = self.layer4_tail.forward(params, &f4m);
        (f4t, RestCache { l2, l3, l4m, l4t })
    }

    /// Input gradient through layer4-tail back to the layer2 input, with
    /// read-only parameters.
    pub fn backward_rest_input(
        &self,
        params: &Params,
        cache: &RestCache,
        dy: &Array3<f64>,
    ) -> Array3<f64> {
        let d4m = self.layer4_tail.backward_input(params, &cache.l4t, dy);
        let d3 = self.layer4_main.backward_input(params, &cache.l4m, &d4m);
        let d2 = self.layer3.backward_input(params, &cache.l3, &d3);
        self.layer2.backward_input(params, &cache.l2, &d2)
    }

    pub fn backward_rest(
        &self,
        params: &mut Params,
        cache: &RestCache,
        dy: &Array3<f64>,
        trainable: &dyn Fn(Stage) -> bool,
    ) -> Array3<f64> {
        let d4m = self
            .layer4_tail
            .backward(params, &cache.l4t, dy, trainable(Stage::Layer4Tail));
        let d3 = self
            .layer4_main
            .backward(params, &cache.l4m, &d4m, trainable(Stage::Layer4Main));
        let d2 = self
            .layer3
            .backward(params, &cache.l3, &d3, trainable(Stage::Layer3));
        self.layer2
            .backward(params, &cache.l2, &d2, trainable(Stage::Layer2))
    }

    pub fn backward_low(
        &self,
        params: &mut Params,
        cache: &LowCache,
        dy: &Array3<f64>,
        trainable: &dyn Fn(Stage) -> bool,
    ) {
        let dsr2 = self
            .layer1
            .backward(params, &cache.l1, dy, trainable(Stage::Layer1));
        if !trainable(Stage::Stem) {
            return;
        }
        let dn2 = nn::relu_backward(&cache.sr2, &dsr2);
        let dy2 = self.stem_gn2.backward(params, &cache.sg2, &dn2, true);
        let dsr1 = self.stem_conv2.backward(params, &cache.sr1, &dy2, true);
        let dn1 = nn::relu_backward(&cache.sr1, &dsr1);
        let dy1 = self.stem_gn1.backward(params, &cache.sg1, &dn1, true);
        let _ = self.stem_conv1.backward(params, &cache.img, &dy1, true);
    }
}

fn concat_channels(parts: &[&Array3<f64>]) -> Array3<f64> {
    let (h, w, _) = parts[0].dim();
    let total: usize = parts.iter().map(|p| p.dim().2).sum();
    let mut out = Array3::zeros((h, w, total));
    let mut offset = 0;
    for p in parts {
        let c = p.dim().2;
        out.slice_mut(ndarray::s![.., .., offset..offset + c]).assign(p);
        offset += c;
    }
    out
}

fn split_channels(d: &Array3<f64>, sizes: &[usize]) -> Vec<Array3<f64>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for &c in sizes {
        out.push(d.slice(ndarray::s![.., .., offset..offset + c]).to_owned());
        offset += c;
    }
    out
}

/// Atrous-pyramid decoder with a low-level skip, at reduced widths.
#[derive(Debug, Clone)]
pub struct Decoder {
    b0: Conv2d,
    b0_gn: GroupNorm,
    b1: Conv2d,
    b1_gn: GroupNorm,
    b2: Conv2d,
    b2_gn: GroupNorm,
    pool_proj: Conv2d,
    pool_gn: GroupNorm,
    merge: Conv2d,
    merge_gn: GroupNorm,
    skip_proj: Conv2d,
    skip_gn: GroupNorm,
    head1: Conv2d,
    head1_gn: GroupNorm,
    head2: Conv2d,
    head2_gn: GroupNorm,
    classifier: Conv2d,
    aspp_c: usize,
}

pub struct DecoderCache {
    f4: Array3<f64>,
    skip_in: Array3<f64>,
    b0_g: GnCache,
    b0_r: Array3<f64>,
    b1_g: GnCache,
    b1_r: Array3<f64>,
    b2_g: GnCache,
    b2_r: Array3<f64>,
    pooled: Array3<f64>,
    pool_g: GnCache,
    pool_r: Array3<f64>,
    concat: Array3<f64>,
    merge_g: GnCache,
    merge_r: Array3<f64>,
    merge_up: Array3<f64>,
    skip_g: GnCache,
    skip_r: Array3<f64>,
    fused: Array3<f64>,
    h1_g: GnCache,
    h1_r: Array3<f64>,
    h2_g: GnCache,
    h2_r: Array3<f64>,
    logits_low: Array3<f64>,
}

impl Decoder {
    pub fn new(params: &mut Params, config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let s = Stage::Decoder;
        let ca = config.aspp_channels;
        let b0 = Conv2d::new(params, "dec.aspp0", s, 1, config.c4, ca, 1, 0, 1, rng);
        let b0_gn = GroupNorm::new(params, "dec.aspp0_gn", s, ca, groups_for(ca));
        let b1 = Conv2d::new(params, "dec.aspp1", s, 3, config.c4, ca, 1, 1, 1, rng);
        let b1_gn = GroupNorm::new(params, "dec.aspp1_gn", s, ca, groups_for(ca));
        let b2 = Conv2d::new(params, "dec.aspp2", s, 3, config.c4, ca, 1, 2, 2, rng);
        let b2_gn = GroupNorm::new(params, "dec.aspp2_gn", s, ca, groups_for(ca));
        let pool_proj = Conv2d::new(params, "dec.aspp_pool", s, 1, config.c4, ca, 1, 0, 1, rng);
        let pool_gn = GroupNorm::new(params, "dec.aspp_pool_gn", s, ca, groups_for(ca));
        let merge = Conv2d::new(params, "dec.merge", s, 1, 4 * ca, ca, 1, 0, 1, rng);
        let merge_gn = GroupNorm::new(params, "dec.merge_gn", s, ca, groups_for(ca));
        let skip_proj = Conv2d::new(
            params,
            "dec.skip",
            s,
            1,
            config.c1,
            config.skip_channels,
            1,
            0,
            1,
            rng,
        );
        let skip_gn = GroupNorm::new(
            params,
            "dec.skip_gn",
            s,
            config.skip_channels,
            groups_for(config.skip_channels),
        );
        let head1 = Conv2d::new(
            params,
            "dec.head1",
            s,
            3,
            ca + config.skip_channels,
            config.head_channels,
            1,
            1,
            1,
            rng,
        );
        let head1_gn = GroupNorm::new(
            params,
            "dec.head1_gn",
            s,
            config.head_channels,
            groups_for(config.head_channels),
        );
        let head2 = Conv2d::new(
            params,
            "dec.head2",
            s,
            3,
            config.head_channels,
            config.head_channels,
            1,
            1,
            1,
            rng,
        );
        let head2_gn = GroupNorm::new(
            params,
            "dec.head2_gn",
            s,
            config.head_channels,
            groups_for(config.head_channels),
        );
        let classifier = Conv2d::new(
            params,
            "dec.classifier",
            s,
            1,
            config.head_channels,
            config.num_classes,
            1,
            0,
            1,
            rng,
        );
        Self {
            b0,
            b0_gn,
            b1,
            b1_gn,
            b2,
            b2_gn,
            pool_proj,
            pool_gn,
            merge,
            merge_gn,
            skip_proj,
            skip_gn,
            head1,
            head1_gn,
            head2,
            head2_gn,
            classifier,
            aspp_c: ca,
        }
    }

    /// `f4` at stride 16, `skip_in` at stride 4; logits at (out_h, out_w).
    pub fn forward(
        &self,
        params: &Params,
        f4: &Array3<f64>,
        skip_in: &Array3<f64>,
        out_h: usize,
        out_w: usize,
    ) -> (Array3<f64>, DecoderCache) {
        let (h4, w4, c4) = f4.dim();
        let (hs, ws, _) = skip_in.dim();
        let run = |conv: &Conv2d, gn: &GroupNorm, x: &Array3<f64>| {
            let y = conv.forward(params, x);
            let (n, g) = gn.forward(params, &y);
            (nn::relu(&n), g)
        };
        let (b0_r, b0_g) = run(&self.b0, &self.b0_gn, f4);
        let (b1_r, b1_g) = run(&self.b1, &self.b1_gn, f4);
        let (b2_r, b2_g) = run(&self.b2, &self.b2_gn, f4);
        let pooled_vec = nn::global_avg_pool(f4);
        let pooled = Array3::from_shape_fn((1, 1, c4), |(_, _, c)| pooled_vec[c]);
        let (pool_r, pool_g) = run(&self.pool_proj, &self.pool_gn, &pooled);
        let pool_b = Array3::from_shape_fn((h4, w4, self.aspp_c), |(_, _, c)| pool_r[[0, 0, c]]);
        let concat = concat_channels(&[&b0_r, &b1_r, &b2_r, &pool_b]);
        let (merge_r, merge_g) = run(&self.merge, &self.merge_gn, &concat);
        let merge_up = nn::resize_bilinear(&merge_r, hs, ws);
        let (skip_r, skip_g) = run(&self.skip_proj, &self.skip_gn, skip_in);
        let fused = concat_channels(&[&merge_up, &skip_r]);
        let (h1_r, h1_g) = run(&self.head1, &self.head1_gn, &fused);
        let (h2_r, h2_g) = run(&self.head2, &self.head2_gn, &h1_r);
        let logits_low = self.classifier.forward(params, &h2_r);
        let logits = nn::resize_bilinear(&logits_low, out_h, out_w);
        let cache = DecoderCache {
            f4: f4.clone(),
            skip_in: skip_in.clone(),
            b0_g,
            b0_r,
            b1_g,
            b1_r,
            b2_g,
            b2_r,
            pooled,
            pool_g,
            pool_r,
            concat,
            merge_g,
            merge_r,
            merge_up,
            skip_g,
            skip_r,
            fused,
            h1_g,
            h1_r,
            h2_g,
            h2_r,
            logits_low,
        };
        (logits, cache)
    }

    /// Returns (d_f4, d_skip_in).
    pub fn backward(
        &self,
        params: &mut Params,
        cache: &DecoderCache,
        dlogits: &Array3<f64>,
        trainable: bool,
    ) -> (Array3<f64>, Array3<f64>) {
        let (h4, w4, _) = cache.f4.dim();
        let (hl, wl, _) = cache.logits_low.dim();
        let dlow = nn::resize_bilinear_backward(dlogits, hl, wl);
        let dh2r = self
            .classifier
            .backward(params, &cache.h2_r, &dlow, trainable);
        let back = |params: &mut Params,
                    conv: &Conv2d,
                    gn: &GroupNorm,
                    x: &Array3<f64>,
                    r: &Array3<f64>,
                    g: &GnCache,
                    dy: &Array3<f64>| {
            let dn = nn::relu_backward(r, dy);
            let dyc = gn.backward(params, g, &dn, trainable);
            conv.backward(params, x, &dyc, trainable)
        };
        let dh1r = back(
            params, &self.head2, &self.head2_gn, &cache.h1_r, &cache.h2_r, &cache.h2_g, &dh2r,
        );
        let dfused = back(
            params, &self.head1, &self.head1_gn, &cache.fused, &cache.h1_r, &cache.h1_g, &dh1r,
        );
        let parts = split_channels(&dfused, &[cache.merge_up.dim().2, cache.skip_r.dim().2]);
        let dskip_in = back(
            params,
            &self.skip_proj,
            &self.skip_gn,
            &cache.skip_in,
            &cache.skip_r,
            &cache.skip_g,
            &parts[1],
        );
        let dmerge_r =
            nn::resize_bilinear_backward(&parts[0], cache.merge_r.dim().0, cache.merge_r.dim().1);
        let dconcat = back(
            params,
            &self.merge,
            &self.merge_gn,
            &cache.concat,
            &cache.merge_r,
            &cache.merge_g,
            &dmerge_r,
        );
        let ca = self.aspp_c;
        let dparts = split_channels(&dconcat, &[ca, ca, ca, ca]);
        let mut df4 = back(
            params, &self.b0, &self.b0_gn, &cache.f4, &cache.b0_r, &cache.b0_g, &dparts[0],
        );
        df4 += &back(
            params, &self.b1, &self.b1_gn, &cache.f4, &cache.b1_r, &cache.b1_g, &dparts[1],
        );
        df4 += &back(
            params, &self.b2, &self.b2_gn, &cache.f4, &cache.b2_r, &cache.b2_g, &dparts[2],
        );
        let mut dpool_r = Array3::zeros((1, 1, ca));
        for y in 0..h4 {
            for x in 0..w4 {
                for c in 0..ca {
                    dpool_r[[0, 0, c]] += dparts[3][[y, x, c]];
                }
            }
        }
        let dpooled = back(
            params,
            &self.pool_proj,
            &self.pool_gn,
            &cache.pooled,
            &cache.pool_r,
            &cache.pool_g,
            &dpool_r,
        );
        let dpool_vec: Vec<f64> = (0..dpooled.dim().2).map(|c| dpooled[[0, 0, c]]).collect();
        df4 += &nn::global_avg_pool_backward(&dpool_vec, h4, w4);
        (df4, dskip_in)
    }
}

/// Which stages stay trainable; the decoder always does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub stem: bool,
    pub layer1: bool,
    pub layer2: bool,
    pub layer3: bool,
    pub layer4_main: bool,
    pub layer4_tail: bool,
    pub decoder: bool,
}

impl FreezePolicy {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        stem: bool,
        layer1: bool,
        layer2: bool,
        layer3: bool,
        layer4_main: bool,
        layer4_tail: bool,
        decoder: bool,
    ) -> Result<Self, ModelError> {
        if !decoder {
            return Err(ModelError::DecoderFrozen);
        }
        Ok(Self {
            stem,
            layer1,
            layer2,
            layer3,
            layer4_main,
            layer4_tail,
            decoder,
        })
    }

    pub fn trainable(&self, stage: Stage) -> bool {
        match stage {
            Stage::Stem => self.stem,
            Stage::Layer1 => self.layer1,
            Stage::Layer2 => self.layer2,
            Stage::Layer3 => self.layer3,
            Stage::Layer4Main => self.layer4_main,
            Stage::Layer4Tail => self.layer4_tail,
            Stage::Decoder => self.decoder,
            Stage::Encoder => false,
        }
    }

    pub fn trainable_stages(&self) -> Vec<Stage> {
        Stage::ALL
            .iter()
            .copied()
            .filter(|&s| s != Stage::Encoder && self.trainable(s))
            .collect()
    }

    pub fn frozen_stages(&self) -> Vec<Stage> {
        Stage::ALL
            .iter()
            .copied()
            .filter(|&s| s != Stage::Encoder && !self.trainable(s))
            .collect()
    }
}

/// Named freezing strategies, including the freeze-depth sweep points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePreset {
    /// Only the last backbone block and the decoder train.
    Famix,
    /// Full fine-tuning.
    Ft,
    /// Decoder probing: the whole backbone stays frozen.
    Dp,
    /// Two phases: decoder probing, then full fine-tuning.
    DpFt,
    /// Frozen through layer1.
    L1,
    /// Frozen through layer2.
    L12,
    /// Frozen through layer3.
    L13,
    /// Frozen through most of layer4; its tail still trains (same split as `Famix`).
    L14Partial,
    /// Frozen through all of layer4; decoder probing under another name.
    L14,
}

impl FreezePreset {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "famix" => Self::Famix,
            "ft" => Self::Ft,
            "dp" => Self::Dp,
            "dp_ft" | "dpft" | "dp-ft" => Self::DpFt,
            "l1" => Self::L1,
            "l1-2" | "l12" => Self::L12,
            "l1-3" | "l13" => Self::L13,
            "l1-4p" | "l14p" => Self::L14Partial,
            "l1-4" | "l14" => Self::L14,
            other => return Err(ModelError::UnknownPreset(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Famix => "famix",
            Self::Ft => "ft",
            Self::Dp => "dp",
            Self::DpFt => "dp_ft",
            Self::L1 => "l1",
            Self::L12 => "l1-2",
            Self::L13 => "l1-3",
            Self::L14Partial => "l1-4p",
            Self::L14 => "l1-4",
        }
    }

    /// Per-phase freeze policies; one phase for every preset but `DpFt`.
    pub fn phases(&self) -> Vec<FreezePolicy> {
        let p = |stem, l1, l2, l3, l4m, l4t| {
            FreezePolicy::new(stem, l1, l2, l3, l4m, l4t, true).expect("decoder trainable")
        };
        match self {
            Self::Famix | Self::L14Partial => vec![p(false, false, false, false, false, true)],
            Self::Ft => vec![p(true, true, true, true, true, true)],
            Self::Dp | Self::L14 => vec![p(false, false, false, false, false, false)],
            Self::DpFt => vec![
                p(false, false, false, false, false, false),
                p(true, true, true, true, true, true),
            ],
            Self::L1 => vec![p(false, false, true, true, true, true)],
            Self::L12 => vec![p(false, false, false, true, true, true)],
            Self::L13 => vec![p(false, false, false, false, true, true)],
        }
    }

    /// Sweep points for the freeze-depth ablation, shallowest freezing first.
    pub fn freeze_sweep() -> Vec<FreezePreset> {
        vec![Self::L1, Self::L12, Self::L13, Self::L14Partial, Self::L14]
    }
}

/// Segmentation network: trunk + decoder over one parameter arena.
pub struct SegModel {
    pub params: Params,
    pub trunk: Trunk,
    pub decoder: Decoder,
}

pub struct ForwardCache {
    pub low: LowCache,
    pub rest: RestCache,
    pub dec: DecoderCache,
}

impl SegModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Self {
        let mut params = Params::new();
        let trunk = Trunk::new(&mut params, config, rng);
        let decoder = Decoder::new(&mut params, &config, rng);
        Self {
            params,
            trunk,
            decoder,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.trunk.config
    }

    /// Copies same-named trunk weights from a donor arena (the encoder's
    /// visual pathway); decoder weights are left at their fresh init.
    pub fn init_trunk_from(&mut self, donor: &Params) {
        use std::collections::HashMap;
        let donor_by_name: HashMap<&str, usize> = donor
            .blocks()
            .iter()
            .enumerate()
            .map(|(i, b)| (b.name.as_str(), i))
            .collect();
        for block in self.params.blocks_mut() {
            if block.stage == Stage::Decoder {
                continue;
            }
            if let Some(&idx) = donor_by_name.get(block.name.as_str()) {
                let src = &donor.blocks()[idx];
                assert_eq!(src.shape, block.shape, "trunk shape mismatch on {}", block.name);
                block.data.copy_from_slice(&src.data);
            }
        }
    }

    /// Low-level features for an image (stride 4).
    pub fn forward_low(&self, img: &Array3<f64>) -> Result<(Array3<f64>, LowCache), ModelError> {
        let (_, _, c) = img.dim();
        if c != self.trunk.config.in_channels {
            return Err(ModelError::InputChannels {
                expected: self.trunk.config.in_channels,
                got: c,
            });
        }
        Ok(self.trunk.forward_low(&self.params, img))
    }

    /// Rest of the network on (possibly restylized) low-level features.
    pub fn forward_from_features(
        &self,
        low: LowCache,
        features: &Array3<f64>,
        out_h: usize,
        out_w: usize,
    ) -> (Array3<f64>, ForwardCache) {
        let (f4, rest) = self.trunk.forward_rest(&self.params, features);
        let (logits, dec) = self
            .decoder
            .forward(&self.params, &f4, features, out_h, out_w);
        (logits, ForwardCache { low, rest, dec })
    }

    /// Backpropagates `dlogits` down to the (restylized) low-level features,
    /// accumulating weight gradients for trainable stages only.
    pub fn backward_to_features(
        &mut self,
        cache: &ForwardCache,
        dlogits: &Array3<f64>,
        policy: &FreezePolicy,
    ) -> Array3<f64> {
        let trainable = |s: Stage| policy.trainable(s);
        let (df4, dskip) = self
            .decoder
            .backward(&mut self.params, &cache.dec, dlogits, policy.decoder);
        let mut dfeat = self
            .trunk
            .backward_rest(&mut self.params, &cache.rest, &df4, &trainable);
        dfeat += &dskip;
        dfeat
    }

    /// Continues backprop below the randomization point when stem or layer1
    /// train; otherwise a no-op.
    pub fn backward_low(
        &mut self,
        cache: &ForwardCache,
        dfeatures: &Array3<f64>,
        policy: &FreezePolicy,
    ) {
        if !policy.stem && !policy.layer1 {
            return;
        }
        let trainable = |s: Stage| policy.trainable(s);
        self.trunk
            .backward_low(&mut self.params, &cache.low, dfeatures, &trainable);
    }

    pub fn optimizer(&self, momentum: f64, weight_decay: f64) -> SgdMomentum {
        SgdMomentum {
            momentum,
            weight_decay,
        }
    }
}
