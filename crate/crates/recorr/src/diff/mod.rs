//! Reverse-mode differentiation over the fixed op set the network needs.
//!
//! A [`Tape`] records one forward computation as an append-only list of
//! nodes, each holding its output volume. Values are computed eagerly at
//! construction, so node ids double as topological order; `backward`
//! walks them in reverse, accumulating adjoints per node and gradients
//! per named parameter into the [`ParamStore`].
//!
//! Scalars (losses) are volumes of shape 1 x [1, 1, 1].

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use kernels::ConvShape;
pub use params::{AdamW, ParamEntry, ParamStore};

use crate::error::{RecorrError, Result};
use crate::vol::{upsample_volume2, warp_by_volume, Scalar, Volume};

use kernels as kn;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    /// Leaf viewing a store entry's flat values; its adjoint feeds the
    /// entry's gradient accumulator.
    Param {
        name: String,
    },
    /// Weights and bias are captured at record time so backward stays
    /// consistent even if the store is updated in between.
    Conv3d {
        input: NodeId,
        weight: String,
        bias: Option<String>,
        w: Vec<T>,
        shape: ConvShape,
        stride: usize,
    },
    LeakyRelu {
        input: NodeId,
        slope: T,
    },
    Sigmoid {
        input: NodeId,
    },
    Tanh {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    /// Elementwise `k*x + c` with scalar constants.
    Affine {
        input: NodeId,
        k: T,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    SliceChannels {
        input: NodeId,
        start: usize,
    },
    Upsample2 {
        input: NodeId,
    },
    Warp {
        image: NodeId,
        field: NodeId,
    },
    Correlation {
        fixed: NodeId,
        moving: NodeId,
        radius: usize,
    },
    Mse {
        a: NodeId,
        b: NodeId,
    },
    NccLoss {
        a: NodeId,
        b: NodeId,
        radius: usize,
        eps: T,
    },
    GradL2 {
        input: NodeId,
    },
    DiceLoss {
        a: NodeId,
        b: NodeId,
        eps: T,
    },
    SumAll {
        input: NodeId,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Volume<T>,
}

/// One recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Leaf adjoints left over after `backward`, for diagnostics and
/// gradient checks of non-parameter inputs.
pub struct Adjoints<T> {
    adj: Vec<Option<Volume<T>>>,
}

impl<T: Scalar> Adjoints<T> {
    pub fn get(&self, id: NodeId) -> Option<&Volume<T>> {
        self.adj[id.0].as_ref()
    }
}

fn scalar_volume<T: Scalar>(v: T) -> Volume<T> {
    Volume {
        channels: 1,
        dims: [1, 1, 1],
        spacing: [1.0; 3],
        data: vec![v],
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Volume<T> {
        &self.nodes[id.0].value
    }

    /// Value of a scalar (loss) node.
    pub fn scalar_value(&self, id: NodeId) -> Result<T> {
        let v = self.value(id);
        if v.data.len() != 1 {
            return Err(RecorrError::shape(
                "scalar_value",
                "1 value",
                format!("{}", v.data.len()),
            ));
        }
        Ok(v.data[0])
    }

    fn push(&mut self, op: Op<T>, value: Volume<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Volume<T>) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Leaf over a parameter entry, viewed flat (1 channel, [1, 1, len]).
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<NodeId> {
        let e = store.get(name)?;
        let value = Volume::new(1, [1, 1, e.values.len()], [1.0; 3], e.values.clone())?;
        Ok(self.push(
            Op::Param {
                name: name.to_string(),
            },
            value,
        ))
    }

    /// 3-D convolution reading `weight` (rank-5 entry) and optionally
    /// `bias` (rank-1) from the store.
    pub fn conv3d(
        &mut self,
        store: &ParamStore<T>,
        input: NodeId,
        weight: &str,
        bias: Option<&str>,
        stride: usize,
    ) -> Result<NodeId> {
        let we = store.get(weight)?;
        if we.shape.len() != 5 {
            return Err(RecorrError::InvalidArgument(format!(
                "conv weight {weight:?} must be rank 5, got shape {:?}",
                we.shape
            )));
        }
        let shape = ConvShape {
            c_out: we.shape[0],
            c_in: we.shape[1],
            k: [we.shape[2], we.shape[3], we.shape[4]],
        };
        let w = we.values.clone();
        let b = match bias {
            Some(name) => {
                let be = store.get(name)?;
                if be.shape != vec![shape.c_out] {
                    return Err(RecorrError::shape(
                        "conv bias",
                        format!("[{}]", shape.c_out),
                        format!("{:?}", be.shape),
                    ));
                }
                Some(be.values.clone())
            }
            None => None,
        };
        let value = kn::conv3d_forward(self.value(input), &w, shape, b.as_deref(), stride)?;
        Ok(self.push(
            Op::Conv3d {
                input,
                weight: weight.to_string(),
                bias: bias.map(|s| s.to_string()),
                w,
                shape,
                stride,
            },
            value,
        ))
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> NodeId {
        let s = T::from_f64(slope);
        let mut value = self.value(input).clone();
        for v in value.data.iter_mut() {
            if *v < T::zero() {
                *v *= s;
            }
        }
        self.push(Op::LeakyRelu { input, slope: s }, value)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let mut value = self.value(input).clone();
        for v in value.data.iter_mut() {
            *v = T::one() / (T::one() + (-*v).exp());
        }
        self.push(Op::Sigmoid { input }, value)
    }

    pub fn tanh(&mut self, input: NodeId) -> NodeId {
        let mut value = self.value(input).clone();
        for v in value.data.iter_mut() {
            *v = v.tanh();
        }
        self.push(Op::Tanh { input }, value)
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &'static str) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.channels != vb.channels || va.dims != vb.dims {
            return Err(RecorrError::shape(
                what,
                format!("{}x{:?}", va.channels, va.dims),
                format!("{}x{:?}", vb.channels, vb.dims),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        for (v, o) in value.data.iter_mut().zip(self.nodes[b.0].value.data.iter()) {
            *v += *o;
        }
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let mut value = self.value(a).clone();
        for (v, o) in value.data.iter_mut().zip(self.nodes[b.0].value.data.iter()) {
            *v -= *o;
        }
        Ok(self.push(Op::Sub { a, b }, value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let mut value = self.value(a).clone();
        for (v, o) in value.data.iter_mut().zip(self.nodes[b.0].value.data.iter()) {
            *v *= *o;
        }
        Ok(self.push(Op::Mul { a, b }, value))
    }

    /// Elementwise `k*x + c`.
    pub fn affine(&mut self, input: NodeId, k: f64, c: f64) -> NodeId {
        let (kt, ct) = (T::from_f64(k), T::from_f64(c));
        let mut value = self.value(input).clone();
        for v in value.data.iter_mut() {
            *v = kt * *v + ct;
        }
        self.push(Op::Affine { input, k: kt }, value)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(RecorrError::InvalidArgument("concat of zero parts".into()));
        }
        let dims = self.value(parts[0]).dims;
        let spacing = self.value(parts[0]).spacing;
        let mut channels = 0;
        for &p in parts {
            let v = self.value(p);
            if v.dims != dims {
                return Err(RecorrError::shape(
                    "concat",
                    format!("{dims:?}"),
                    format!("{:?}", v.dims),
                ));
            }
            channels += v.channels;
        }
        let mut data = Vec::with_capacity(channels * dims[0] * dims[1] * dims[2]);
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let value = Volume {
            channels,
            dims,
            spacing,
            data,
        };
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            value,
        ))
    }

    pub fn slice_channels(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(input);
        if start + len > v.channels || len == 0 {
            return Err(RecorrError::InvalidArgument(format!(
                "channel slice {start}..{} out of range for {} channels",
                start + len,
                v.channels
            )));
        }
        let n = v.voxels();
        let value = Volume {
            channels: len,
            dims: v.dims,
            spacing: v.spacing,
            data: v.data[start * n..(start + len) * n].to_vec(),
        };
        Ok(self.push(Op::SliceChannels { input, start }, value))
    }

    pub fn upsample2(&mut self, input: NodeId) -> NodeId {
        let value = upsample_volume2(self.value(input));
        self.push(Op::Upsample2 { input }, value)
    }

    /// `out(p) = image(p + u(p))`, differentiable in both the image and
    /// the 3-channel field.
    pub fn warp(&mut self, image: NodeId, field: NodeId) -> Result<NodeId> {
        let value = warp_by_volume(self.value(image), self.value(field))?;
        Ok(self.push(Op::Warp { image, field }, value))
    }

    pub fn correlation(&mut self, fixed: NodeId, moving: NodeId, radius: usize) -> Result<NodeId> {
        let value = kn::correlation_forward(self.value(fixed), self.value(moving), radius)?;
        Ok(self.push(
            Op::Correlation {
                fixed,
                moving,
                radius,
            },
            value,
        ))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mse")?;
        let value = scalar_volume(kn::mse_forward(self.value(a), self.value(b)));
        Ok(self.push(Op::Mse { a, b }, value))
    }

    /// Local NCC loss over windows of odd side `window`.
    pub fn ncc_loss(&mut self, a: NodeId, b: NodeId, window: usize, eps: f64) -> Result<NodeId> {
        self.binary_same_shape(a, b, "ncc")?;
        if window % 2 == 0 || window == 0 {
            return Err(RecorrError::InvalidArgument(format!(
                "NCC window must be odd and positive, got {window}"
            )));
        }
        let radius = window / 2;
        let e = T::from_f64(eps);
        let value = scalar_volume(kn::ncc_loss_forward(self.value(a), self.value(b), radius, e));
        Ok(self.push(
            Op::NccLoss {
                a,
                b,
                radius,
                eps: e,
            },
            value,
        ))
    }

    pub fn grad_l2(&mut self, input: NodeId) -> Result<NodeId> {
        let value = scalar_volume(kn::grad_l2_forward(self.value(input))?);
        Ok(self.push(Op::GradL2 { input }, value))
    }

    pub fn dice_loss(&mut self, a: NodeId, b: NodeId, eps: f64) -> Result<NodeId> {
        self.binary_same_shape(a, b, "dice")?;
        let e = T::from_f64(eps);
        let value = scalar_volume(kn::dice_loss_forward(self.value(a), self.value(b), e));
        Ok(self.push(Op::DiceLoss { a, b, eps: e }, value))
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let mut s = T::zero();
        for v in &self.value(input).data {
            s += *v;
        }
        self.push(Op::SumAll { input }, scalar_volume(s))
    }

    /// Reverse pass from a scalar loss. Parameter gradients accumulate
    /// into `store`; leaf adjoints are returned for diagnostics.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<Adjoints<T>> {
        if self.value(loss).data.len() != 1 {
            return Err(RecorrError::InvalidArgument(
                "backward requires a scalar loss node".into(),
            ));
        }
        let mut adjs: Vec<Option<Volume<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adjs[loss.0] = Some(scalar_volume(T::one()));

        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            // Leaves keep their adjoints for the caller.
            let adj = match node.op {
                Op::Input => continue,
                Op::Param { ref name } => {
                    if let Some(a) = &adjs[i] {
                        store.accumulate_grad(name, &a.data)?;
                    }
                    continue;
                }
                _ => match adjs[i].take() {
                    Some(a) => a,
                    None => continue,
                },
            };

            match &node.op {
                Op::Input | Op::Param { .. } => unreachable!(),
                Op::Conv3d {
                    input,
                    weight,
                    bias,
                    w,
                    shape,
                    stride,
                } => {
                    let in_val = self.value(*input);
                    let d_in = ensure(&mut adjs, input.0, in_val);
                    let mut d_w = vec![T::zero(); w.len()];
                    let mut d_b = bias.as_ref().map(|_| vec![T::zero(); shape.c_out]);
                    kn::conv3d_backward(in_val, w, *shape, *stride, &adj, d_in, &mut d_w, d_b.as_deref_mut());
                    store.accumulate_grad(weight, &d_w)?;
                    if let (Some(name), Some(db)) = (bias, d_b) {
                        store.accumulate_grad(name, &db)?;
                    }
                }
                Op::LeakyRelu { input, slope } => {
                    let x = self.value(*input);
                    let d_in = ensure(&mut adjs, input.0, x);
                    for i in 0..x.data.len() {
                        let g = if x.data[i] >= T::zero() { T::one() } else { *slope };
                        d_in.data[i] += adj.data[i] * g;
                    }
                }
                Op::Sigmoid { input } => {
                    let d_in = ensure(&mut adjs, input.0, &node.value);
                    for i in 0..node.value.data.len() {
                        let s = node.value.data[i];
                        d_in.data[i] += adj.data[i] * s * (T::one() - s);
                    }
                }
                Op::Tanh { input } => {
                    let d_in = ensure(&mut adjs, input.0, &node.value);
                    for i in 0..node.value.data.len() {
                        let t = node.value.data[i];
                        d_in.data[i] += adj.data[i] * (T::one() - t * t);
                    }
                }
                Op::Add { a, b } => {
                    accumulate(ensure(&mut adjs, a.0, &adj), &adj.data, T::one());
                    accumulate(ensure(&mut adjs, b.0, &adj), &adj.data, T::one());
                }
                Op::Sub { a, b } => {
                    accumulate(ensure(&mut adjs, a.0, &adj), &adj.data, T::one());
                    accumulate(ensure(&mut adjs, b.0, &adj), &adj.data, -T::one());
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    {
                        let d_a = ensure(&mut adjs, a.0, va);
                        for i in 0..adj.data.len() {
                            d_a.data[i] += adj.data[i] * vb.data[i];
                        }
                    }
                    let d_b = ensure(&mut adjs, b.0, vb);
                    for i in 0..adj.data.len() {
                        d_b.data[i] += adj.data[i] * va.data[i];
                    }
                }
                Op::Affine { input, k } => {
                    accumulate(ensure(&mut adjs, input.0, &adj), &adj.data, *k);
                }
                Op::Concat { parts } => {
                    let mut start = 0;
                    for &p in parts {
                        let v = self.value(p);
                        let n = v.voxels() * v.channels;
                        let d_p = ensure(&mut adjs, p.0, v);
                        for (d, s) in d_p.data.iter_mut().zip(adj.data[start..start + n].iter()) {
                            *d += *s;
                        }
                        start += n;
                    }
                }
                Op::SliceChannels { input, start } => {
                    let v = self.value(*input);
                    let n = v.voxels();
                    let d_in = ensure(&mut adjs, input.0, v);
                    let base = start * n;
                    for (j, s) in adj.data.iter().enumerate() {
                        d_in.data[base + j] += *s;
                    }
                }
                Op::Upsample2 { input } => {
                    let v = self.value(*input);
                    let d_in = ensure(&mut adjs, input.0, v);
                    kn::upsample2_backward(&adj, v.dims, d_in);
                }
                Op::Warp { image, field } => {
                    let (img, fld) = (self.value(*image), self.value(*field));
                    // The two inputs may be the same node (self-composition);
                    // accumulate image and field contributions separately.
                    let mut d_img = Volume::zeros(img.channels, img.dims);
                    let mut d_fld = Volume::zeros(3, fld.dims);
                    kn::warp_backward(img, fld, &adj, &mut d_img, &mut d_fld);
                    accumulate(ensure(&mut adjs, image.0, img), &d_img.data, T::one());
                    accumulate(ensure(&mut adjs, field.0, fld), &d_fld.data, T::one());
                }
                Op::Correlation {
                    fixed,
                    moving,
                    radius,
                } => {
                    let (vf, vm) = (self.value(*fixed), self.value(*moving));
                    let mut d_f = Volume::zeros(vf.channels, vf.dims);
                    let mut d_m = Volume::zeros(vm.channels, vm.dims);
                    kn::correlation_backward(vf, vm, *radius, &adj, &mut d_f, &mut d_m);
                    accumulate(ensure(&mut adjs, fixed.0, vf), &d_f.data, T::one());
                    accumulate(ensure(&mut adjs, moving.0, vm), &d_m.data, T::one());
                }
                Op::Mse { a, b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut d_a = Volume::zeros(va.channels, va.dims);
                    let mut d_b = Volume::zeros(vb.channels, vb.dims);
                    kn::mse_backward(va, vb, adj.data[0], &mut d_a, &mut d_b);
                    accumulate(ensure(&mut adjs, a.0, va), &d_a.data, T::one());
                    accumulate(ensure(&mut adjs, b.0, vb), &d_b.data, T::one());
                }
                Op::NccLoss { a, b, radius, eps } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut d_a = Volume::zeros(va.channels, va.dims);
                    let mut d_b = Volume::zeros(vb.channels, vb.dims);
                    kn::ncc_loss_backward(va, vb, *radius, *eps, adj.data[0], &mut d_a, &mut d_b);
                    accumulate(ensure(&mut adjs, a.0, va), &d_a.data, T::one());
                    accumulate(ensure(&mut adjs, b.0, vb), &d_b.data, T::one());
                }
                Op::GradL2 { input } => {
                    let v = self.value(*input);
                    let d_in = ensure(&mut adjs, input.0, v);
                    kn::grad_l2_backward(v, adj.data[0], d_in);
                }
                Op::DiceLoss { a, b, eps } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut d_a = Volume::zeros(va.channels, va.dims);
                    let mut d_b = Volume::zeros(vb.channels, vb.dims);
                    kn::dice_loss_backward(va, vb, *eps, adj.data[0], &mut d_a, &mut d_b);
                    accumulate(ensure(&mut adjs, a.0, va), &d_a.data, T::one());
                    accumulate(ensure(&mut adjs, b.0, vb), &d_b.data, T::one());
                }
                Op::SumAll { input } => {
                    let d_in = ensure(&mut adjs, input.0, self.value(*input));
                    let a = adj.data[0];
                    for d in d_in.data.iter_mut() {
                        *d += a;
                    }
                }
            }
        }
        Ok(Adjoints { adj: adjs })
    }
}

/// Lazily creates a zero adjoint volume shaped like `like`.
fn ensure<'a, T: Scalar>(
    adjs: &'a mut [Option<Volume<T>>],
    id: usize,
    like: &Volume<T>,
) -> &'a mut Volume<T> {
    if adjs[id].is_none() {
        adjs[id] = Some(Volume::zeros(like.channels, like.dims));
    }
    adjs[id].as_mut().unwrap()
}

fn accumulate<T: Scalar>(dst: &mut Volume<T>, src: &[T], k: T) {
    for (d, s) in dst.data.iter_mut().zip(src.iter()) {
        *d += k * *s;
    }
}
