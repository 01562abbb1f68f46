//! Matrix, convolution, and token-shaping ops for [`Graph`].

use std::rc::Rc;

use ndarray::{Array2, ArrayD, Ix2, IxDyn};

use super::graph::{Graph, Var};

fn as2(d: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    d.view().into_dimensionality::<Ix2>().expect("expected 2-D")
}

fn dyn2(a: Array2<f64>) -> ArrayD<f64> {
    a.into_dyn()
}

impl Graph {
    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let da = self.rc(a);
        let db = self.rc(b);
        let out = as2(&da).dot(&as2(&db));
        self.push(
            dyn2(out),
            vec![a.0, b.0],
            Some(Box::new(move |go| {
                let g = as2(go);
                let ga = g.dot(&as2(&db).t());
                let gb = as2(&da).t().dot(&g);
                vec![Some(dyn2(ga)), Some(dyn2(gb))]
            })),
        )
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let out = as2(self.data(a)).t().to_owned();
        self.push(
            dyn2(out),
            vec![a.0],
            Some(Box::new(|go| vec![Some(dyn2(as2(go).t().to_owned()))])),
        )
    }

    /// Columns `[start, start+len)` of a `[T,D]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = as2(self.data(a));
        let (t, d) = src.dim();
        assert!(start + len <= d);
        let out = src.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(
            dyn2(out),
            vec![a.0],
            Some(Box::new(move |go| {
                let mut g = Array2::zeros((t, d));
                g.slice_mut(ndarray::s![.., start..start + len])
                    .assign(&as2(go));
                vec![Some(dyn2(g))]
            })),
        )
    }

    /// Horizontal concatenation of `[T,di]` matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let t = as2(self.data(parts[0])).nrows();
        let widths: Vec<usize> = parts.iter().map(|&p| as2(self.data(p)).ncols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Array2::zeros((t, total));
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            out.slice_mut(ndarray::s![.., off..off + w])
                .assign(&as2(self.data(p)));
            off += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            dyn2(out),
            ids,
            Some(Box::new(move |go| {
                let g = as2(go);
                let mut out = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    out.push(Some(dyn2(g.slice(ndarray::s![.., off..off + w]).to_owned())));
                    off += w;
                }
                out
            })),
        )
    }

    /// Broadcast-add a `[D]` row vector to every row of `[T,D]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let src = as2(self.data(a));
        let r = self.data(row).clone();
        assert_eq!(r.len(), src.ncols());
        let rv = r.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let out = &src + &rv;
        self.push(
            dyn2(out),
            vec![a.0, row.0],
            Some(Box::new(|go| {
                let g = as2(go);
                let gr = g.sum_axis(ndarray::Axis(0));
                vec![Some(go.clone()), Some(gr.into_dyn())]
            })),
        )
    }

    /// Row-wise softmax of `[T,N]`.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = as2(self.data(a));
        let mut out = src.to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let y = Rc::new(out);
        let cap = Rc::clone(&y);
        self.push(
            dyn2((*y).clone()),
            vec![a.0],
            Some(Box::new(move |go| {
                let g = as2(go);
                let mut gx = g.to_owned();
                for (mut grow, yrow) in gx.rows_mut().into_iter().zip(cap.rows()) {
                    let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                    for (gi, yi) in grow.iter_mut().zip(yrow.iter()) {
                        *gi = yi * (*gi - dot);
                    }
                }
                vec![Some(dyn2(gx))]
            })),
        )
    }

    /// Layer normalization over the last axis of `[T,D]`, with learnable
    /// gain/bias of shape `[D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let src = as2(self.data(x)).to_owned();
        let gm = self.data(gamma).clone();
        let d = src.ncols() as f64;
        let mut xhat = src.clone();
        let mut inv_std = Vec::with_capacity(src.nrows());
        for mut row in xhat.rows_mut() {
            let mu = row.sum() / d;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            row.mapv_inplace(|v| (v - mu) * is);
        }
        let gmv = gm.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let btv = self
            .data(beta)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let out = &(&xhat * &gmv) + &btv;
        let xhat = Rc::new(xhat);
        let cap_xhat = Rc::clone(&xhat);
        self.push(
            dyn2(out),
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |go| {
                let g = as2(go);
                let gmv = gm.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut gx = Array2::zeros(g.raw_dim());
                for ((grow, xrow), (mut gxrow, &is)) in g
                    .rows()
                    .into_iter()
                    .zip(cap_xhat.rows())
                    .zip(gx.rows_mut().into_iter().zip(&inv_std))
                {
                    // d/dx of layer norm: (gh - mean(gh) - xhat * mean(gh*xhat)) * inv_std
                    let gh: Vec<f64> = grow.iter().zip(gmv.iter()).map(|(a, b)| a * b).collect();
                    let m1 = gh.iter().sum::<f64>() / d;
                    let m2 = gh
                        .iter()
                        .zip(xrow.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / d;
                    for ((gi, &ghi), &xh) in gxrow.iter_mut().zip(&gh).zip(xrow.iter()) {
                        *gi = (ghi - m1 - xh * m2) * is;
                    }
                }
                let ggamma = (&g * &*cap_xhat).sum_axis(ndarray::Axis(0));
                let gbeta = g.sum_axis(ndarray::Axis(0));
                vec![
                    Some(dyn2(gx)),
                    Some(ggamma.into_dyn()),
                    Some(gbeta.into_dyn()),
                ]
            })),
        )
    }

    /// Same-padding stride-1 2-D convolution: x `[Ci,H,W]`, w `[Co,Ci,kh,kw]`
    /// (odd kernels), bias `[Co]` -> `[Co,H,W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let dx = self.rc(x);
        let dw = self.rc(w);
        let (ci, h, wd) = {
            let s = dx.shape();
            (s[0], s[1], s[2])
        };
        let (co, ciw, kh, kw) = {
            let s = dw.shape();
            (s[0], s[1], s[2], s[3])
        };
        assert_eq!(ci, ciw, "conv2d channel mismatch");
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d expects odd kernels");
        let (ph, pw) = (kh / 2, kw / 2);

        let cols = Rc::new(im2col(&dx, ci, h, wd, kh, kw, ph, pw));
        let wmat = as2_owned(&dw, co, ci * kh * kw);
        let mut out_mat = wmat.dot(&*cols); // [Co, H*W]
        {
            let b = self.data(bias);
            for (mut row, &bv) in out_mat.rows_mut().into_iter().zip(b.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        let out = out_mat
            .into_shape_with_order(IxDyn(&[co, h, wd]))
            .unwrap();

        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let cols_b = Rc::clone(&cols);
        self.push(
            out,
            vec![x.0, w.0, bias.0],
            Some(Box::new(move |go| {
                let go_mat = go
                    .view()
                    .into_shape_with_order((co, h * wd))
                    .expect("conv grad reshape")
                    .to_owned();
                let gb = go_mat.sum_axis(ndarray::Axis(1)).into_dyn();
                let gw = if need_w {
                    let g = go_mat.dot(&cols_b.t());
                    Some(
                        g.into_shape_with_order(IxDyn(&[co, ci, kh, kw]))
                            .unwrap(),
                    )
                } else {
                    None
                };
                let gx = if need_x {
                    let wmat = as2_owned_dyn(&dw, co, ci * kh * kw);
                    let gcols = wmat.t().dot(&go_mat); // [Ci*kh*kw, H*W]
                    Some(col2im(&gcols, ci, h, wd, kh, kw, ph, pw))
                } else {
                    None
                };
                vec![gx, gw, Some(gb)]
            })),
        )
    }

    /// Valid-mode (no padding) stride-1 convolution without bias:
    /// x `[Ci,H,W]`, w `[Co,Ci,kh,kw]` -> `[Co,H-kh+1,W-kw+1]`.
    pub fn conv2d_valid(&mut self, x: Var, w: Var) -> Var {
        let dx = self.rc(x);
        let dw = self.rc(w);
        let (ci, h, wd) = {
            let s = dx.shape();
            (s[0], s[1], s[2])
        };
        let (co, ciw, kh, kw) = {
            let s = dw.shape();
            (s[0], s[1], s[2], s[3])
        };
        assert_eq!(ci, ciw);
        assert!(h >= kh && wd >= kw, "kernel larger than input");
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let mut cols = Array2::zeros((ci * kh * kw, oh * ow));
        for c in 0..ci {
            for dy in 0..kh {
                for dxk in 0..kw {
                    let row = (c * kh + dy) * kw + dxk;
                    for y in 0..oh {
                        for xx in 0..ow {
                            cols[[row, y * ow + xx]] = dx[[c, y + dy, xx + dxk]];
                        }
                    }
                }
            }
        }
        let cols = Rc::new(cols);
        let wmat = as2_owned(&dw, co, ci * kh * kw);
        let out_mat = wmat.dot(&*cols);
        let out = out_mat.into_shape_with_order(IxDyn(&[co, oh, ow])).unwrap();
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let cols_b = Rc::clone(&cols);
        self.push(
            out,
            vec![x.0, w.0],
            Some(Box::new(move |go| {
                let go_mat = go
                    .view()
                    .into_shape_with_order((co, oh * ow))
                    .unwrap()
                    .to_owned();
                let gw = if need_w {
                    Some(
                        go_mat
                            .dot(&cols_b.t())
                            .into_shape_with_order(IxDyn(&[co, ci, kh, kw]))
                            .unwrap(),
                    )
                } else {
                    None
                };
                let gx = if need_x {
                    let wmat = as2_owned(&dw, co, ci * kh * kw);
                    let gcols = wmat.t().dot(&go_mat);
                    let mut g = ArrayD::zeros(IxDyn(&[ci, h, wd]));
                    for c in 0..ci {
                        for dy in 0..kh {
                            for dxk in 0..kw {
                                let row = (c * kh + dy) * kw + dxk;
                                for y in 0..oh {
                                    for xx in 0..ow {
                                        g[[c, y + dy, xx + dxk]] += gcols[[row, y * ow + xx]];
                                    }
                                }
                            }
                        }
                    }
                    Some(g)
                } else {
                    None
                };
                vec![gx, gw]
            })),
        )
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let d = self.rc(x);
        let s = d.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let mut out = ArrayD::zeros(IxDyn(&[c, h / 2, w / 2]));
        for ci in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    out[[ci, y, xx]] = 0.25
                        * (d[[ci, 2 * y, 2 * xx]]
                            + d[[ci, 2 * y + 1, 2 * xx]]
                            + d[[ci, 2 * y, 2 * xx + 1]]
                            + d[[ci, 2 * y + 1, 2 * xx + 1]]);
                }
            }
        }
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |go| {
                let mut g = ArrayD::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for y in 0..h / 2 {
                        for xx in 0..w / 2 {
                            let v = 0.25 * go[[ci, y, xx]];
                            g[[ci, 2 * y, 2 * xx]] = v;
                            g[[ci, 2 * y + 1, 2 * xx]] = v;
                            g[[ci, 2 * y, 2 * xx + 1]] = v;
                            g[[ci, 2 * y + 1, 2 * xx + 1]] = v;
                        }
                    }
                }
                vec![Some(g)]
            })),
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let d = self.rc(x);
        let s = d.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = ArrayD::zeros(IxDyn(&[c, 2 * h, 2 * w]));
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = d[[ci, y, xx]];
                    out[[ci, 2 * y, 2 * xx]] = v;
                    out[[ci, 2 * y + 1, 2 * xx]] = v;
                    out[[ci, 2 * y, 2 * xx + 1]] = v;
                    out[[ci, 2 * y + 1, 2 * xx + 1]] = v;
                }
            }
        }
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |go| {
                let mut g = ArrayD::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            g[[ci, y, xx]] = go[[ci, 2 * y, 2 * xx]]
                                + go[[ci, 2 * y + 1, 2 * xx]]
                                + go[[ci, 2 * y, 2 * xx + 1]]
                                + go[[ci, 2 * y + 1, 2 * xx + 1]];
                        }
                    }
                }
                vec![Some(g)]
            })),
        )
    }

    /// Zero-pad `[C,H,W]` on the bottom/right to `[C,h2,w2]`.
    pub fn pad_zero_to(&mut self, x: Var, h2: usize, w2: usize) -> Var {
        let d = self.rc(x);
        let s = d.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h2 >= h && w2 >= w);
        let mut out = ArrayD::zeros(IxDyn(&[c, h2, w2]));
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[[ci, y, xx]] = d[[ci, y, xx]];
                }
            }
        }
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |go| {
                let mut g = ArrayD::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            g[[ci, y, xx]] = go[[ci, y, xx]];
                        }
                    }
                }
                vec![Some(g)]
            })),
        )
    }

    /// Crop `[C,H,W]` to the top-left `[C,h2,w2]`.
    pub fn crop_to(&mut self, x: Var, h2: usize, w2: usize) -> Var {
        let d = self.rc(x);
        let s = d.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h2 <= h && w2 <= w);
        let mut out = ArrayD::zeros(IxDyn(&[c, h2, w2]));
        for ci in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[[ci, y, xx]] = d[[ci, y, xx]];
                }
            }
        }
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |go| {
                let mut g = ArrayD::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            g[[ci, y, xx]] = go[[ci, y, xx]];
                        }
                    }
                }
                vec![Some(g)]
            })),
        )
    }

    /// Stack two `[Ci,H,W]` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let da = self.rc(a);
        let db = self.rc(b);
        let (ca, h, w) = {
            let s = da.shape();
            (s[0], s[1], s[2])
        };
        let cb = db.shape()[0];
        assert_eq!(&db.shape()[1..], &[h, w]);
        let mut out = ArrayD::zeros(IxDyn(&[ca + cb, h, w]));
        for (ci, src, base) in [(ca, &da, 0), (cb, &db, ca)] {
            for c in 0..ci {
                for y in 0..h {
                    for xx in 0..w {
                        out[[base + c, y, xx]] = src[[c, y, xx]];
                    }
                }
            }
        }
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |go| {
                let mut ga = ArrayD::zeros(IxDyn(&[ca, h, w]));
                let mut gb = ArrayD::zeros(IxDyn(&[cb, h, w]));
                for c in 0..ca {
                    for y in 0..h {
                        for xx in 0..w {
                            ga[[c, y, xx]] = go[[c, y, xx]];
                        }
                    }
                }
                for c in 0..cb {
                    for y in 0..h {
                        for xx in 0..w {
                            gb[[c, y, xx]] = go[[ca + c, y, xx]];
                        }
                    }
                }
                vec![Some(ga), Some(gb)]
            })),
        )
    }

    /// Non-overlapping `p x p` patches of `[C,H,W]` as `[T, C*p*p]` tokens,
    /// token order row-major over the patch grid, features ordered (c,dy,dx).
    pub fn patchify(&mut self, x: Var, p: usize) -> Var {
        let d = self.rc(x);
        let s = d.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h % p == 0 && w % p == 0, "patchify needs divisible dims");
        let (gh, gw) = (h / p, w / p);
        let t = gh * gw;
        let fd = c * p * p;
        let mut out = Array2::zeros((t, fd));
        for by in 0..gh {
            for bx in 0..gw {
                let tok = by * gw + bx;
                for ci in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            out[[tok, (ci * p + dy) * p + dx]] =
                                d[[ci, by * p + dy, bx * p + dx]];
                        }
                    }
                }
            }
        }
        self.push(
            dyn2(out),
            vec![x.0],
            Some(Box::new(move |go| {
                let g = as2(go);
                let mut gx = ArrayD::zeros(IxDyn(&[c, h, w]));
                for by in 0..gh {
                    for bx in 0..gw {
                        let tok = by * gw + bx;
                        for ci in 0..c {
                            for dy in 0..p {
                                for dx in 0..p {
                                    gx[[ci, by * p + dy, bx * p + dx]] =
                                        g[[tok, (ci * p + dy) * p + dx]];
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            })),
        )
    }

    /// Inverse of [`Graph::patchify`].
    pub fn unpatchify(&mut self, x: Var, c: usize, h: usize, w: usize, p: usize) -> Var {
        let d = self.rc(x);
        let src = as2(&d);
        let (gh, gw) = (h / p, w / p);
        assert_eq!(src.nrows(), gh * gw);
        assert_eq!(src.ncols(), c * p * p);
        let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
        for by in 0..gh {
            for bx in 0..gw {
                let tok = by * gw + bx;
                for ci in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            out[[ci, by * p + dy, bx * p + dx]] =
                                src[[tok, (ci * p + dy) * p + dx]];
                        }
                    }
                }
            }
        }
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |go| {
                let mut g = Array2::zeros((gh * gw, c * p * p));
                for by in 0..gh {
                    for bx in 0..gw {
                        let tok = by * gw + bx;
                        for ci in 0..c {
                            for dy in 0..p {
                                for dx in 0..p {
                                    g[[tok, (ci * p + dy) * p + dx]] =
                                        go[[ci, by * p + dy, bx * p + dx]];
                                }
                            }
                        }
                    }
                }
                vec![Some(dyn2(g))]
            })),
        )
    }
}

fn as2_owned(d: &ArrayD<f64>, rows: usize, cols: usize) -> Array2<f64> {
    d.view()
        .into_shape_with_order((rows, cols))
        .expect("reshape to 2-D")
        .to_owned()
}

fn as2_owned_dyn(d: &ArrayD<f64>, rows: usize, cols: usize) -> Array2<f64> {
    as2_owned(d, rows, cols)
}

fn im2col(
    x: &ArrayD<f64>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
) -> Array2<f64> {
    let mut cols = Array2::zeros((ci * kh * kw, h * w));
    for c in 0..ci {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[[row, y * w + xx]] = x[[c, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    gcols: &Array2<f64>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
) -> ArrayD<f64> {
    let mut gx = ArrayD::zeros(IxDyn(&[ci, h, w]));
    for c in 0..ci {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        gx[[c, sy as usize, sx as usize]] += gcols[[row, y * w + xx]];
                    }
                }
            }
        }
    }
    gx
}
