use cssl_core::checkpoint;
use cssl_core::config::RunConfig;
use cssl_core::model::{mae, ModelConfig, ModelParams, Pooling};
use cssl_core::pipeline::{embed_dataset, load_data};

fn stats(name: &str, params: &ModelParams, data: &cssl_core::data::Dataset, labels: &[u8]) {
    let emb = embed_dataset(params, data, Pooling::Mean).unwrap();
    let d = params.config().d_enc;
    let n = data.len();
    // per-dim across-image std, then mean of dims; and mean |feature|
    let mut mean = vec![0.0; d];
    for i in 0..n { for j in 0..d { mean[j] += emb[i*d+j]/n as f64; } }
    let mut var = vec![0.0; d];
    for i in 0..n { for j in 0..d { let c = emb[i*d+j]-mean[j]; var[j] += c*c/n as f64; } }
    let avg_std = var.iter().map(|v| v.sqrt()).sum::<f64>()/d as f64;
    let avg_mag = mean.iter().map(|v| v.abs()).sum::<f64>()/d as f64;
    // class-separation: distance between class means / pooled std
    let mut m0 = vec![0.0; d]; let mut m1v = vec![0.0; d];
    let (mut n0, mut n1) = (0.0, 0.0);
    for i in 0..n { if labels[i]==0 { n0+=1.0; for j in 0..d { m0[j]+=emb[i*d+j]; } } else { n1+=1.0; for j in 0..d { m1v[j]+=emb[i*d+j]; } } }
    for j in 0..d { m0[j]/=n0; m1v[j]/=n1; }
    let gap = (0..d).map(|j| (m0[j]-m1v[j]).powi(2)).sum::<f64>().sqrt();
    println!("{name:>10}: across-image std {avg_std:.4}  |mean| {avg_mag:.4}  class-mean gap {gap:.4}  gap/std {:.3}", gap/(avg_std*(d as f64).sqrt()));
    // weight norms
    let wn = params.data.iter().map(|v| v*v).sum::<f64>().sqrt();
    println!("{name:>10}: weight l2 {wn:.2}");
}

fn main() {
    let data = load_data(std::path::Path::new("/tmp/cal12/data")).unwrap();
    let labels = data.labeled_train.dense_labels().unwrap();
    let cfg = RunConfig::tiny();
    let random = ModelParams::init(ModelConfig::tiny(), 5).unwrap();
    stats("random", &random, &data.labeled_train, &labels);
    let m1 = checkpoint::load(std::path::Path::new("/tmp/cal12/work/cells/mae_d1_only_d1_then_d2_6_3_1_1/m1.ckpt")).unwrap();
    stats("pretrained", &m1.params, &data.labeled_train, &labels);
    let _ = (cfg, mae::mse_loss);
}
