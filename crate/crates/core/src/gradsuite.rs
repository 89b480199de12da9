//! Finite-difference checks of every differentiable operation and of the
//! model compositions built from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clip::{
    encode_text, matching_loss_on_tape, visual_context_prompting, AlignmentConfig, Linear,
    PromptParams, PromptSet, TextParams, Vocabulary,
};
use crate::correction::{
    generator_candidates, member_forward, CandidateGenerator, GeneratorConfig, GeneratorNoise,
    MemberParams,
};
use crate::error::Result;
use crate::fourierformer::{
    bind_blocks, fourier_channel_evolution, fourier_spatial_interaction, fourierformer_forward,
    BlockParams, FpeConfig, MixOptions,
};
use crate::numeric::{finite_diff_check, Objective, Scalar, Tape, Tensor, Var};
use crate::params::{Bind, Binder};

/// Relative-error bound every case must stay under.
pub const GRAD_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Add,
    Sub,
    Mul,
    Scale,
    Neg,
    Offset,
    Abs,
    Exp,
    Log,
    Sqrt,
    Tanh,
    LeakyRelu,
    MatmulLhs,
    MatmulRhs,
    BatchMatmulLhs,
    BatchMatmulRhs,
    Transpose,
    Reshape,
    BroadcastTo,
    Sum,
    Mean,
    SumAxis,
    MeanAxis,
    Softmax,
    LogSoftmax,
    Concat,
    Slice,
    Select,
    AddBias,
    LinearInput,
    LinearWeight,
    PointwiseConv,
    LayerNormInput,
    LayerNormGamma,
    DepthwiseInput,
    DepthwiseKernel,
    Dft2d,
    Idft2dReal,
    Idft2dImag,
    L2Normalize,
    Gather,
}

/// One op applied to the parameter, contracted with fixed random weights.
struct OpCase {
    op: Op,
    aux: Tensor<f64>,
    aux2: Tensor<f64>,
    contract: Option<Tensor<f64>>,
}

fn contract<T: Scalar>(tape: &mut Tape<T>, y: Var, w: &Option<Tensor<f64>>) -> Result<Var> {
    match w {
        None => Ok(y),
        Some(w) => {
            let w = tape.constant(w.cast());
            let p = tape.mul(y, w)?;
            Ok(tape.sum(p))
        }
    }
}

impl Objective for OpCase {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, p: Var) -> Result<Var> {
        let a = tape.constant(self.aux.cast());
        let b = tape.constant(self.aux2.cast());
        let y = match self.op {
            Op::Add => tape.add(p, a)?,
            Op::Sub => tape.sub(a, p)?,
            Op::Mul => tape.mul(p, a)?,
            Op::Scale => tape.scale(p, -1.7),
            Op::Neg => tape.neg(p),
            Op::Offset => tape.offset(p, 0.3),
            Op::Abs => tape.abs(p),
            Op::Exp => tape.exp(p),
            Op::Log => tape.log(p),
            Op::Sqrt => tape.sqrt(p),
            Op::Tanh => tape.tanh(p),
            Op::LeakyRelu => tape.leaky_relu(p, 0.2),
            Op::MatmulLhs => tape.matmul(p, a)?,
            Op::MatmulRhs => tape.matmul(a, p)?,
            Op::BatchMatmulLhs => tape.batch_matmul(p, a)?,
            Op::BatchMatmulRhs => tape.batch_matmul(a, p)?,
            Op::Transpose => tape.transpose(p)?,
            Op::Reshape => tape.reshape(p, &[4, 3])?,
            Op::BroadcastTo => tape.broadcast_to(p, &[2, 3])?,
            Op::Sum => tape.sum(p),
            Op::Mean => tape.mean(p),
            Op::SumAxis => tape.sum_axis(p, 1)?,
            Op::MeanAxis => tape.mean_axis(p, 1)?,
            Op::Softmax => tape.softmax(p),
            Op::LogSoftmax => tape.log_softmax(p),
            Op::Concat => tape.concat(&[a, p], 1)?,
            Op::Slice => tape.slice(p, 1, 1, 2)?,
            Op::Select => tape.select(p, 1)?,
            Op::AddBias => tape.add_bias(a, p)?,
            Op::LinearInput => tape.linear(p, a, b)?,
            Op::LinearWeight => tape.linear(a, p, b)?,
            Op::PointwiseConv => tape.pointwise_conv(a, p, b)?,
            Op::LayerNormInput => tape.layer_norm(p, a, b, 1e-5)?,
            Op::LayerNormGamma => tape.layer_norm(a, p, b, 1e-5)?,
            Op::DepthwiseInput => tape.depthwise_conv3x3(p, a, b)?,
            Op::DepthwiseKernel => tape.depthwise_conv3x3(a, p, b)?,
            Op::Dft2d => {
                let (re, im) = tape.dft2d(p)?;
                let im = tape.scale(im, 0.7);
                tape.add(re, im)?
            }
            Op::Idft2dReal => tape.idft2d(p, a)?,
            Op::Idft2dImag => tape.idft2d(a, p)?,
            Op::L2Normalize => tape.l2_normalize(p),
            Op::Gather => tape.gather(p, &[2, 0, 2, 1])?,
        };
        contract(tape, y, &self.contract)
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Values with magnitude in `[0.2, 1.2]` and random sign, clear of kinks.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.2);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).expect("shape")
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, OpCase, Tensor<f64>, Vec<usize>)> {
    let none = Tensor::<f64>::zeros(&[1]);
    let mut cases = Vec::new();
    let mut push =
        |name, op, p: Tensor<f64>, aux: Tensor<f64>, aux2: Tensor<f64>, out: Vec<usize>| {
            cases.push((
                name,
                OpCase {
                    op,
                    aux,
                    aux2,
                    contract: None,
                },
                p,
                out,
            ));
        };
    let s = [3, 4];
    push(
        "add",
        Op::Add,
        randn(&s, rng),
        randn(&s, rng),
        none.clone(),
        s.to_vec(),
    );
    push(
        "sub",
        Op::Sub,
        randn(&s, rng),
        randn(&s, rng),
        none.clone(),
        s.to_vec(),
    );
    push(
        "mul",
        Op::Mul,
        randn(&s, rng),
        randn(&s, rng),
        none.clone(),
        s.to_vec(),
    );
    push(
        "scale",
        Op::Scale,
        randn(&s, rng),
        none.clone(),
        none.clone(),
        s.to_vec(),
    );
    push(
        "neg",
        Op::Neg,
        randn(&s, rng),
        none.clone(),
        none.clone(),
        s.to_vec(),
    );
    push(
        "offset",
        Op::Offset,
        randn(&s, rng),
        none.clone(),
        none.clone(),
        s.to_vec(),
    );
    push(
        "abs",
        Op::Abs,
        away_from_zero(&s, rng),
        none.clone(),
        none.clone(),
        s.to_vec(),
    );
    push(
        "exp",
        Op::Exp,
        randn(&s, rng),
        none.clone(),
        none.clone(),
        s.to_vec(),
    );
    push(
        "log",
        Op::Log,
        positive(&s, rng),
        none.clone(),
        none.clone(),
        s.to_vec(),
    );
    push(
        "sqrt",
        Op::Sqrt,
        positive(&s, rng),
        none.clone(),
        none.clone(),
        s.to_vec(),
    );
    push(
        "tanh",
        Op::Tanh,
        randn(&s, rng),
        none.clone(),
        none.clone(),
        s.to_vec(),
    );
    push(
        "leaky_relu",
        Op::LeakyRelu,
        away_from_zero(&s, rng),
        none.clone(),
        none.clone(),
        s.to_vec(),
    );
    push(
        "matmul_lhs",
        Op::MatmulLhs,
        randn(&[2, 3, 4], rng),
        randn(&[4, 5], rng),
        none.clone(),
        vec![2, 3, 5],
    );
    push(
        "matmul_rhs",
        Op::MatmulRhs,
        randn(&[4, 5], rng),
        randn(&[3, 4], rng),
        none.clone(),
        vec![3, 5],
    );
    push(
        "batch_matmul_lhs",
        Op::BatchMatmulLhs,
        randn(&[2, 3, 4], rng),
        randn(&[2, 4, 2], rng),
        none.clone(),
        vec![2, 3, 2],
    );
    push(
        "batch_matmul_rhs",
        Op::BatchMatmulRhs,
        randn(&[2, 4, 2], rng),
        randn(&[2, 3, 4], rng),
        none.clone(),
        vec![2, 3, 2],
    );
    push(
        "transpose",
        Op::Transpose,
        randn(&[2, 3, 4], rng),
        none.clone(),
        none.clone(),
        vec![2, 4, 3],
    );
    push(
        "reshape",
        Op::Reshape,
        randn(&[2, 6], rng),
        none.clone(),
        none.clone(),
        vec![4, 3],
    );
    push(
        "broadcast_to",
        Op::BroadcastTo,
        randn(&[3], rng),
        none.clone(),
        none.clone(),
        vec![2, 3],
    );
    push(
        "sum",
        Op::Sum,
        randn(&s, rng),
        none.clone(),
        none.clone(),
        vec![],
    );
    push(
        "mean",
        Op::Mean,
        randn(&s, rng),
        none.clone(),
        none.clone(),
        vec![],
    );
    push(
        "sum_axis",
        Op::SumAxis,
        randn(&[2, 3, 4], rng),
        none.clone(),
        none.clone(),
        vec![2, 4],
    );
    push(
        "mean_axis",
        Op::MeanAxis,
        randn(&[2, 3, 4], rng),
        none.clone(),
        none.clone(),
        vec![2, 4],
    );
    push(
        "softmax",
        Op::Softmax,
        randn(&s, rng),
        none.clone(),
        none.clone(),
        s.to_vec(),
    );
    push(
        "log_softmax",
        Op::LogSoftmax,
        randn(&s, rng),
        none.clone(),
        none.clone(),
        s.to_vec(),
    );
    push(
        "concat",
        Op::Concat,
        randn(&[3, 2], rng),
        randn(&[3, 4], rng),
        none.clone(),
        vec![3, 6],
    );
    push(
        "slice",
        Op::Slice,
        randn(&[2, 4, 3], rng),
        none.clone(),
        none.clone(),
        vec![2, 2, 3],
    );
    push(
        "select",
        Op::Select,
        randn(&[3, 4], rng),
        none.clone(),
        none.clone(),
        vec![4],
    );
    push(
        "add_bias",
        Op::AddBias,
        randn(&[4], rng),
        randn(&[2, 3, 4], rng),
        none.clone(),
        vec![2, 3, 4],
    );
    push(
        "linear_input",
        Op::LinearInput,
        randn(&[3, 4], rng),
        randn(&[4, 2], rng),
        randn(&[2], rng),
        vec![3, 2],
    );
    push(
        "linear_weight",
        Op::LinearWeight,
        randn(&[4, 2], rng),
        randn(&[3, 4], rng),
        randn(&[2], rng),
        vec![3, 2],
    );
    push(
        "pointwise_conv",
        Op::PointwiseConv,
        randn(&[3, 2], rng),
        randn(&[1, 2, 2, 3], rng),
        randn(&[2], rng),
        vec![1, 2, 2, 2],
    );
    push(
        "layer_norm_input",
        Op::LayerNormInput,
        randn(&[3, 5], rng),
        randn(&[5], rng),
        randn(&[5], rng),
        vec![3, 5],
    );
    push(
        "layer_norm_gamma",
        Op::LayerNormGamma,
        randn(&[5], rng),
        randn(&[3, 5], rng),
        randn(&[5], rng),
        vec![3, 5],
    );
    push(
        "depthwise_conv3x3_input",
        Op::DepthwiseInput,
        randn(&[1, 4, 4, 2], rng),
        randn(&[3, 3, 2], rng),
        randn(&[2], rng),
        vec![1, 4, 4, 2],
    );
    push(
        "depthwise_conv3x3_kernel",
        Op::DepthwiseKernel,
        randn(&[3, 3, 2], rng),
        randn(&[1, 4, 4, 2], rng),
        randn(&[2], rng),
        vec![1, 4, 4, 2],
    );
    push(
        "dft2d",
        Op::Dft2d,
        randn(&[2, 4, 4, 2], rng),
        none.clone(),
        none.clone(),
        vec![2, 4, 4, 2],
    );
    push(
        "dft2d_odd",
        Op::Dft2d,
        randn(&[3, 5, 2], rng),
        none.clone(),
        none.clone(),
        vec![3, 5, 2],
    );
    push(
        "idft2d_real",
        Op::Idft2dReal,
        randn(&[4, 4, 3], rng),
        randn(&[4, 4, 3], rng),
        none.clone(),
        vec![4, 4, 3],
    );
    push(
        "idft2d_imag",
        Op::Idft2dImag,
        randn(&[4, 4, 3], rng),
        randn(&[4, 4, 3], rng),
        none.clone(),
        vec![4, 4, 3],
    );
    push(
        "l2_normalize",
        Op::L2Normalize,
        randn(&s, rng),
        none.clone(),
        none.clone(),
        s.to_vec(),
    );
    push(
        "gather",
        Op::Gather,
        randn(&[3, 4], rng),
        none.clone(),
        none.clone(),
        vec![4, 4],
    );
    cases
}

/// Two FourierFormer blocks, spatial mean pool, then the matching loss
/// against fixed text embeddings. The parameter is the input feature map.
struct FpeMatching {
    blocks: Vec<BlockParams>,
    cfg: FpeConfig,
    texts: Tensor<f64>,
}

impl Objective for FpeMatching {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, p: Var) -> Result<Var> {
        let s = tape.shape(p).to_vec();
        let blocks = bind_blocks(&self.blocks, &mut Binder::frozen(), tape, "b");
        let y = fourierformer_forward(tape, p, &blocks, &self.cfg)?;
        let y = tape.reshape(y, &[s[0], s[1] * s[2], s[3]])?;
        let emb = tape.mean_axis(y, 1)?;
        let texts = tape.constant(self.texts.cast());
        matching_loss_on_tape(tape, texts, emb, 0.5, None)
    }
}

/// One FourierFormer branch with its parameters fixed; the input varies.
struct Branch {
    block: BlockParams,
    cfg: FpeConfig,
    spatial: bool,
    contract: Tensor<f64>,
}

impl Objective for Branch {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, p: Var) -> Result<Var> {
        let v = self.block.bind(&mut Binder::frozen(), tape, "b");
        let y = if self.spatial {
            fourier_spatial_interaction(tape, p, &v, &self.cfg, MixOptions::default())?
        } else {
            fourier_channel_evolution(tape, p, &v, &self.cfg, MixOptions::default())?
        };
        contract(tape, y, &Some(self.contract.clone()))
    }
}

/// Text encoder output as a function of the learnable context tokens.
struct TextContext {
    text: TextParams,
    cfg: AlignmentConfig,
    seqs: Vec<Vec<usize>>,
    contract: Tensor<f64>,
}

impl Objective for TextContext {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, p: Var) -> Result<Var> {
        let mut v = self.text.bind(&mut Binder::frozen(), tape, "t");
        v.embed.context = p;
        let out = encode_text(tape, &v, &self.cfg, &self.seqs)?;
        contract(tape, out.embeddings, &Some(self.contract.clone()))
    }
}

/// Prompted text as a function of the visual grid.
struct Prompting {
    prompt: PromptParams,
    cfg: FpeConfig,
    text: Tensor<f64>,
    contract: Tensor<f64>,
}

impl Objective for Prompting {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, p: Var) -> Result<Var> {
        let v = self.prompt.bind(&mut Binder::frozen(), tape, "p");
        let text = tape.constant(self.text.cast());
        let y = visual_context_prompting(tape, &v, &self.cfg, text, p)?;
        contract(tape, y, &Some(self.contract.clone()))
    }
}

/// Squared error of an ensemble member as a function of its first layer.
struct Member {
    rest: MemberParams,
    x: Tensor<f64>,
    y: Tensor<f64>,
}

impl Objective for Member {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, p: Var) -> Result<Var> {
        let mut v = self.rest.bind(&mut Binder::frozen(), tape, "m");
        v.w1 = p;
        let x = tape.constant(self.x.cast());
        let out = member_forward(tape, &v, &[10.0, 200.0], x)?;
        let y = tape.constant(self.y.cast());
        let d = tape.sub(out, y)?;
        let sq = tape.mul(d, d)?;
        Ok(tape.mean(sq))
    }
}

/// Mean of a quadratic estimate over generated candidates, as a function of
/// the generator's output layer.
struct Generator {
    gen: CandidateGenerator,
    input: Tensor,
    noise: GeneratorNoise,
}

impl Objective for Generator {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, p: Var) -> Result<Var> {
        let mut v = self.gen.params.bind(&mut Binder::frozen(), tape, "g");
        v.w2 = p;
        let c = generator_candidates(tape, &v, &self.gen.config, &self.input, 45.0, &self.noise)?;
        let d = tape.offset(c, -30.0);
        let sq = tape.mul(d, d)?;
        let m = tape.mean(sq);
        Ok(tape.scale(m, 0.01))
    }
}

fn f32_randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

/// Finite-difference step for the suite. Every evaluation runs on a 64-bit
/// tape, where this step keeps truncation error far below the tolerance.
pub const SUITE_STEP: f64 = 1e-5;

/// Random points per case.
pub const SUITE_POINTS: usize = 5;

fn check<F: Objective>(f: &F, p: &Tensor<f64>) -> Result<f64> {
    finite_diff_check(f, p, SUITE_STEP)
}

/// Runs every case at `SUITE_POINTS` random points and keeps the worst
/// error per case. The composite stack is reported per point.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<GradResult> = Vec::new();
    let mut record = |name: &str, err: f64| match out.iter_mut().find(|r| r.name == name) {
        Some(r) => r.max_rel_error = r.max_rel_error.max(err),
        None => out.push(GradResult {
            name: name.to_string(),
            max_rel_error: err,
        }),
    };
    let cfg = FpeConfig {
        channels: 4,
        blocks: 2,
        ..Default::default()
    };
    let acfg = AlignmentConfig {
        dim: 4,
        text_hidden: 8,
        context_tokens: 3,
        ..Default::default()
    };
    let vocab = Vocabulary::for_template(&acfg.template);
    let prompts = PromptSet::new(&vocab, &acfg.template, vec![3.0, 41.0, 77.0])?;

    for _ in 0..SUITE_POINTS {
        for (name, mut case, p, shape) in op_cases(&mut rng) {
            if !shape.is_empty() {
                case.contract = Some(randn(&shape, &mut rng));
            }
            record(name, check(&case, &p)?);
        }

        for spatial in [true, false] {
            let case = Branch {
                block: BlockParams::init(4, &mut rng),
                cfg: cfg.clone(),
                spatial,
                contract: randn(&[2, 4, 4, 4], &mut rng),
            };
            let name = if spatial {
                "fourier_spatial_interaction"
            } else {
                "fourier_channel_evolution"
            };
            record(name, check(&case, &randn(&[2, 4, 4, 4], &mut rng))?);
        }

        let case = TextContext {
            text: TextParams::init(&vocab, &acfg, &mut rng),
            cfg: acfg.clone(),
            seqs: prompts.tokens.clone(),
            contract: randn(&[3, 4], &mut rng),
        };
        record(
            "text_context_tokens",
            check(&case, &randn(&[3, 4], &mut rng))?,
        );

        let case = Prompting {
            prompt: PromptParams {
                blocks: vec![BlockParams::init(4, &mut rng)],
                head: Linear {
                    weight: f32_randn(&[4, 4], 0.5, &mut rng),
                    bias: f32_randn(&[4], 0.5, &mut rng),
                },
            },
            cfg: FpeConfig {
                channels: 4,
                blocks: 1,
                ..Default::default()
            },
            text: randn(&[3, 4], &mut rng),
            contract: randn(&[2, 3, 4], &mut rng),
        };
        record(
            "visual_context_prompting",
            check(&case, &randn(&[2, 4, 4, 4], &mut rng))?,
        );

        let rest = MemberParams::init(5, 6, 2, &mut rng);
        let p = rest.w1.cast();
        let case = Member {
            rest,
            x: randn(&[7, 5], &mut rng),
            y: randn(&[7, 2], &mut rng).map(|v| v * 10.0),
        };
        record("ensemble_member", check(&case, &p)?);

        let gcfg = GeneratorConfig {
            latent: 3,
            hidden: 5,
            candidates: 6,
            ..Default::default()
        };
        let mut gen = CandidateGenerator::init(4, gcfg, &mut rng);
        gen.params.w2 = f32_randn(&[5, 2], 0.3, &mut rng);
        let case = Generator {
            input: f32_randn(&[4], 1.0, &mut rng),
            noise: GeneratorNoise::draw(6, 3, &mut rng),
            gen,
        };
        let p = case.gen.params.w2.cast();
        record("candidate_generator", check(&case, &p)?);
    }

    let blocks: Vec<BlockParams> = (0..2).map(|_| BlockParams::init(4, &mut rng)).collect();
    for point in 0..SUITE_POINTS {
        let case = FpeMatching {
            blocks: blocks.clone(),
            cfg: cfg.clone(),
            texts: randn(&[3, 4], &mut rng),
        };
        let x = randn(&[3, 4, 4, 4], &mut rng);
        record(
            &format!("fourierformer_matching_point_{point}"),
            check(&case, &x)?,
        );
    }
    Ok(out)
}
