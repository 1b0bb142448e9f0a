use rand::Rng;

use super::sinusoidal::sinusoidal_pe;
use super::{check_even, check_times, PEMatrix, PeInput, PeMethod, PositionalEmbedding};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::{TimeFeatureVector, TIME_FEATURE_DIM};
use crate::error::{Error, Result};

const TABLE_INIT: f64 = 0.1;

/// Table sizes for month, day, weekday, hour and minute.
const CALENDAR_SIZES: [usize; 5] = [12, 31, 7, 24, 60];

fn random_table(store: &mut ParamStore, name: &str, rows: usize, d: usize, rng: &mut impl Rng) -> ParamId {
    let data = (0..rows * d).map(|_| rng.gen_range(-TABLE_INIT..=TABLE_INIT)).collect();
    store.add(name, Tensor::from_vec(&[rows, d], data).expect("table shape"))
}

fn check_table(table: &Tensor, what: &str) -> Result<(usize, usize)> {
    match table.shape() {
        [r, d] => Ok((*r, *d)),
        s => Err(Error::ShapeMismatch(format!("{what} table must be a matrix, got {s:?}"))),
    }
}

/// Table row of each calendar field, in `CALENDAR_SIZES` order.
fn calendar_indices(f: &TimeFeatureVector) -> Result<[usize; 5]> {
    let mut out = [0; 5];
    for (k, (field, value)) in f.calendar_fields().into_iter().enumerate() {
        if !(-0.5 - 1e-9..=0.5 + 1e-9).contains(&value) {
            return Err(Error::FieldOutOfRange { field, value });
        }
        let top = (CALENDAR_SIZES[k] - 1) as f64;
        out[k] = ((value + 0.5) * top).round().clamp(0.0, top) as usize;
    }
    Ok(out)
}

/// Sum of per-field calendar table rows plus the order sinusoid.
pub fn uniform_pe(features: &[TimeFeatureVector], tables: &[Tensor; 5], d_model: usize) -> Result<PEMatrix> {
    let positions: Vec<usize> = (0..features.len()).collect();
    let mut rows = sinusoidal_pe(&positions, d_model)?.rows;
    for (k, t) in tables.iter().enumerate() {
        let (r, d) = check_table(t, "calendar")?;
        if r != CALENDAR_SIZES[k] || d != d_model {
            return Err(Error::ShapeMismatch(format!("calendar table {k}: {:?}", t.shape())));
        }
    }
    for (j, f) in features.iter().enumerate() {
        let idx = calendar_indices(f)?;
        for (k, &i) in idx.iter().enumerate() {
            let src = tables[k].row(i).to_vec();
            for (o, s) in rows.data_mut()[j * d_model..(j + 1) * d_model].iter_mut().zip(src) {
                *o += s;
            }
        }
    }
    Ok(PEMatrix { rows, times: features.iter().map(|f| f.relative_time).collect() })
}

/// Affine map of the full time-feature vector.
pub fn time_feature_pe(features: &[TimeFeatureVector], projection: &Tensor, bias: Option<&[f64]>) -> Result<PEMatrix> {
    let (r, d) = check_table(projection, "projection")?;
    if r != TIME_FEATURE_DIM || bias.is_some_and(|b| b.len() != d) {
        return Err(Error::ShapeMismatch(format!("projection {:?} for {TIME_FEATURE_DIM} features", projection.shape())));
    }
    let mut data = Vec::with_capacity(features.len() * d);
    for f in features {
        let x = f.to_array();
        for c in 0..d {
            let mut v = bias.map_or(0.0, |b| b[c]);
            for (k, xk) in x.iter().enumerate() {
                v += xk * projection.data()[k * d + c];
            }
            data.push(v);
        }
    }
    Ok(PEMatrix {
        rows: Tensor::from_vec(&[features.len(), d], data)?,
        times: features.iter().map(|f| f.relative_time).collect(),
    })
}

fn grid_indices(times: &[f64], grid_resolution: f64, rows: usize) -> Result<Vec<usize>> {
    check_times(times)?;
    let max = (rows - 1) as f64 * grid_resolution;
    times
        .iter()
        .map(|&t| {
            let k = (t / grid_resolution).round();
            if k < 0.0 || k > (rows - 1) as f64 {
                Err(Error::TimeOutOfTableRange { time: t, min: 0.0, max })
            } else {
                Ok(k as usize)
            }
        })
        .collect()
}

/// One learned row per grid cell of width `grid_resolution`.
pub fn simple_pe(times: &[f64], grid_resolution: f64, table: &Tensor) -> Result<PEMatrix> {
    let (rows, d) = check_table(table, "simple")?;
    let idx = grid_indices(times, grid_resolution, rows)?;
    let data = idx.iter().flat_map(|&i| table.row(i).to_vec()).collect();
    Ok(PEMatrix { rows: Tensor::from_vec(&[times.len(), d], data)?, times: times.to_vec() })
}

/// The first `count` rows of an order-indexed table.
pub fn simple_overlap_pe(count: usize, table: &Tensor) -> Result<PEMatrix> {
    let (rows, d) = check_table(table, "simple_overlap")?;
    if count > rows {
        return Err(Error::WindowTooLong { count, max_len: rows });
    }
    if count == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    Ok(PEMatrix {
        rows: Tensor::from_slice(&[count, d], &table.data()[..count * d])?,
        times: (0..count).map(|j| j as f64).collect(),
    })
}

/// Calendar tables plus order sinusoid.
#[derive(Debug, Clone)]
pub struct Uniform {
    pub tables: [ParamId; 5],
    d_model: usize,
}

impl Uniform {
    pub fn new(store: &mut ParamStore, d_model: usize, rng: &mut impl Rng) -> Result<Self> {
        check_even(d_model)?;
        let names = ["month", "day", "weekday", "hour", "minute"];
        let tables = std::array::from_fn(|k| {
            random_table(store, &format!("pe.uniform.{}", names[k]), CALENDAR_SIZES[k], d_model, rng)
        });
        Ok(Self { tables, d_model })
    }
}

impl PositionalEmbedding for Uniform {
    fn method(&self) -> PeMethod {
        PeMethod::Uniform
    }

    fn d_model(&self) -> usize {
        self.d_model
    }

    fn embed(&self, tape: &mut Tape, store: &ParamStore, input: &PeInput) -> Result<Var> {
        let idx = input.features.iter().map(calendar_indices).collect::<Result<Vec<_>>>()?;
        let mut acc = tape.constant(sinusoidal_pe(&input.order, self.d_model)?.rows);
        for (k, &id) in self.tables.iter().enumerate() {
            let table = tape.param(store, id);
            let rows: Vec<usize> = idx.iter().map(|i| i[k]).collect();
            let g = tape.gather_rows(table, &rows)?;
            acc = tape.add(acc, g)?;
        }
        Ok(acc)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.tables.to_vec()
    }
}

/// Learnable affine map of time features.
#[derive(Debug, Clone)]
pub struct TimeFeature {
    pub weight: ParamId,
    pub bias: ParamId,
    d_model: usize,
}

impl TimeFeature {
    pub fn new(store: &mut ParamStore, d_model: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_xavier("pe.time_feature.weight", TIME_FEATURE_DIM, d_model, rng);
        let bias = store.add_zeros("pe.time_feature.bias", &[d_model]);
        Self { weight, bias, d_model }
    }
}

impl PositionalEmbedding for TimeFeature {
    fn method(&self) -> PeMethod {
        PeMethod::TimeFeature
    }

    fn d_model(&self) -> usize {
        self.d_model
    }

    fn embed(&self, tape: &mut Tape, store: &ParamStore, input: &PeInput) -> Result<Var> {
        let feats: Vec<f64> = input.features.iter().flat_map(|f| f.to_array()).collect();
        let x = tape.constant(Tensor::from_vec(&[input.rows(), TIME_FEATURE_DIM], feats)?);
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Grid table keyed by elapsed seconds since the window start.
#[derive(Debug, Clone)]
pub struct Simple {
    pub table: ParamId,
    grid_resolution: f64,
    rows: usize,
    d_model: usize,
}

impl Simple {
    pub fn new(store: &mut ParamStore, d_model: usize, grid_resolution: f64, rows: usize, rng: &mut impl Rng) -> Self {
        let table = random_table(store, "pe.simple.table", rows, d_model, rng);
        Self { table, grid_resolution, rows, d_model }
    }
}

impl PositionalEmbedding for Simple {
    fn method(&self) -> PeMethod {
        PeMethod::Simple
    }

    fn d_model(&self) -> usize {
        self.d_model
    }

    fn embed(&self, tape: &mut Tape, store: &ParamStore, input: &PeInput) -> Result<Var> {
        let idx = grid_indices(&input.elapsed_seconds, self.grid_resolution, self.rows)?;
        let table = tape.param(store, self.table);
        tape.gather_rows(table, &idx)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.table]
    }
}

/// Table keyed by position inside the window.
#[derive(Debug, Clone)]
pub struct SimpleOverlap {
    pub table: ParamId,
    max_len: usize,
    d_model: usize,
}

impl SimpleOverlap {
    pub fn new(store: &mut ParamStore, d_model: usize, max_len: usize, rng: &mut impl Rng) -> Self {
        let table = random_table(store, "pe.simple_overlap.table", max_len, d_model, rng);
        Self { table, max_len, d_model }
    }
}

impl PositionalEmbedding for SimpleOverlap {
    fn method(&self) -> PeMethod {
        PeMethod::SimpleOverlap
    }

    fn d_model(&self) -> usize {
        self.d_model
    }

    fn embed(&self, tape: &mut Tape, store: &ParamStore, input: &PeInput) -> Result<Var> {
        if let Some(&p) = input.order.iter().find(|&&p| p >= self.max_len) {
            return Err(Error::WindowTooLong { count: p + 1, max_len: self.max_len });
        }
        let table = tape.param(store, self.table);
        tape.gather_rows(table, &input.order)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.table]
    }
}

#[cfg(test)]
mod tests {
    use chrono::NaiveDateTime;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{param_gradient_check, Optimizer};
    use crate::data::time_features;

    fn ts(s: &str) -> NaiveDateTime {
        NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S").unwrap()
    }

    fn features(stamps: &[&str]) -> Vec<TimeFeatureVector> {
        let span = (ts(stamps[0]), ts(stamps[stamps.len() - 1]));
        stamps.iter().map(|s| time_features(ts(s), span).unwrap()).collect()
    }

    fn zero_tables(d: usize) -> [Tensor; 5] {
        std::array::from_fn(|k| Tensor::zeros(&[CALENDAR_SIZES[k], d]).unwrap())
    }

    #[test]
    fn uniform_with_zero_tables_is_sinusoidal() {
        let f = features(&["2021-03-01 00:00:00", "2021-03-01 05:00:00", "2021-03-02 07:30:00"]);
        let u = uniform_pe(&f, &zero_tables(8), 8).unwrap();
        assert_eq!(u.rows, sinusoidal_pe(&[0, 1, 2], 8).unwrap().rows);
    }

    #[test]
    fn uniform_identical_fields_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tables: [Tensor; 5] = std::array::from_fn(|k| {
            let n = CALENDAR_SIZES[k] * 4;
            Tensor::from_vec(&[CALENDAR_SIZES[k], 4], (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
        });
        let f = features(&["2021-03-01 10:00:00", "2021-03-03 10:00:00"]);
        let mut g = f[0];
        g.relative_time = 0.77;
        let a = uniform_pe(&[f[0]], &tables, 4).unwrap();
        let b = uniform_pe(&[g], &tables, 4).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn uniform_rejects_out_of_range_field() {
        let mut f = TimeFeatureVector::time_only(0.0);
        f.hour = 0.7;
        assert!(matches!(
            uniform_pe(&[f], &zero_tables(4), 4),
            Err(Error::FieldOutOfRange { field: "hour", .. })
        ));
    }

    #[test]
    fn uniform_month_table_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let layer = Uniform::new(&mut store, 4, &mut rng).unwrap();
        let input = PeInput {
            seq_len: 3,
            relative_time: vec![0.0, 0.5, 1.0],
            elapsed_seconds: vec![0.0, 1.0, 2.0],
            order: vec![0, 1, 2],
            features: features(&["2021-01-31 23:00:00", "2021-02-14 12:00:00", "2021-06-01 00:00:00"]),
        };
        let month = layer.tables[0];
        for id in store.ids().collect::<Vec<_>>() {
            store.set_trainable(id, id == month);
        }
        let forward = |tape: &mut Tape, s: &ParamStore| {
            let p = layer.embed(tape, s, &input)?;
            let sq = tape.mul(p, p)?;
            tape.sum(sq)
        };
        let checks = param_gradient_check(&mut store, forward, 20, 1e-6, &mut rng).unwrap();
        assert!(checks.iter().all(|c| c.relative_error < 1e-4));
    }

    #[test]
    fn time_feature_examples() {
        let f = features(&["2021-03-01 00:00:00", "2021-03-01 05:00:00", "2021-03-02 00:00:00"]);
        let zero = Tensor::zeros(&[TIME_FEATURE_DIM, 3]).unwrap();
        assert!(time_feature_pe(&f, &zero, None).unwrap().rows.data().iter().all(|&x| x == 0.0));
        let mut id = Tensor::zeros(&[TIME_FEATURE_DIM, 2]).unwrap();
        id.data_mut()[0] = 1.0;
        let m = time_feature_pe(&f, &id, None).unwrap();
        for (j, fj) in f.iter().enumerate() {
            assert_eq!(m.row(j)[0], fj.relative_time);
        }
        let bad = Tensor::zeros(&[3, 2]).unwrap();
        assert!(matches!(time_feature_pe(&f, &bad, None), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn time_feature_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = TimeFeature::new(&mut store, 4, &mut rng);
        let input = PeInput {
            seq_len: 2,
            relative_time: vec![0.0, 1.0],
            elapsed_seconds: vec![0.0, 60.0],
            order: vec![0, 1],
            features: features(&["2021-03-01 00:00:00", "2021-03-05 13:00:00"]),
        };
        let forward = |tape: &mut Tape, s: &ParamStore| {
            let p = layer.embed(tape, s, &input)?;
            let t = tape.tanh(p)?;
            tape.sum(t)
        };
        let checks = param_gradient_check(&mut store, forward, 20, 1e-6, &mut rng).unwrap();
        assert!(checks.iter().all(|c| c.relative_error < 1e-4));
    }

    #[test]
    fn simple_examples() {
        let table = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = simple_pe(&[3600.0, 3600.0, 0.0], 3600.0, &table).unwrap();
        assert_eq!(m.row(0), m.row(1));
        assert_eq!(m.row(2), &[1.0, 2.0]);
        assert!(matches!(simple_pe(&[3.0 * 3600.0], 3600.0, &table), Err(Error::TimeOutOfTableRange { .. })));
    }

    #[test]
    fn simple_training_step_touches_only_observed_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let layer = Simple::new(&mut store, 3, 1.0, 10, &mut rng);
        let before = store.value(layer.table).clone();
        let input = PeInput::from_times(&[0.0, 2.0, 7.0]).unwrap();
        let mut tape = Tape::new();
        let p = layer.embed(&mut tape, &store, &input).unwrap();
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward_into(loss, &mut store).unwrap();
        let grad = store.grad(layer.table).unwrap().clone();
        Optimizer::sgd(0.1).step(&mut store).unwrap();
        let after = store.value(layer.table);
        for r in 0..10 {
            let touched = [0, 2, 7].contains(&r);
            let g_zero = grad.row(r).iter().all(|&g| g == 0.0);
            assert_eq!(g_zero, !touched);
            assert_eq!(after.row(r) == before.row(r), !touched);
        }
    }

    #[test]
    fn simple_overlap_examples() {
        let table = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(simple_overlap_pe(3, &table).unwrap().rows, table);
        assert_eq!(simple_overlap_pe(2, &table).unwrap().rows.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(simple_overlap_pe(4, &table), Err(Error::WindowTooLong { count: 4, max_len: 3 })));
    }

    #[test]
    fn simple_overlap_ignores_timestamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let layer = SimpleOverlap::new(&mut store, 4, 8, &mut rng);
        let a = super::super::embed_values(&layer, &store, &PeInput::from_times(&[0.0, 0.1, 0.2]).unwrap()).unwrap();
        let b = super::super::embed_values(&layer, &store, &PeInput::from_times(&[0.0, 0.7, 0.9]).unwrap()).unwrap();
        assert_eq!(a.rows, b.rows);
    }
}
