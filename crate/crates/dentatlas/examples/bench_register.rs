use std::time::Instant;

use dentatlas::phantom::{generate_template, synthesize_subject};
use dentatlas::pipeline::{prepare_subject, PipelineConfig};
use dentatlas::register::{register_linear, register_linear_from, register_syn, RegistrationMode};

fn main() {
    let cfg = PipelineConfig::default();
    let t0 = Instant::now();
    let template = generate_template(1, [96; 3], [0.4; 3]).unwrap();
    println!("template: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let subject = synthesize_subject(&template, 7, 2.0, 0.0).unwrap();
    println!("subject: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let fixed = prepare_subject(&cfg, "f", &template.intensity, &template.labels).unwrap();
    println!("enhance: {:?} (dims {:?})", t0.elapsed(), fixed.channels.intensity.dims());
    let moving = prepare_subject(&cfg, "m", &subject.intensity, &subject.labels).unwrap();

    let t0 = Instant::now();
    let rigid = register_linear(&fixed.channels, &moving.channels, RegistrationMode::Rigid, &cfg.registration).unwrap();
    println!("rigid: {:?} metric {:.4}", t0.elapsed(), rigid.final_metric);

    let t0 = Instant::now();
    let affine = register_linear_from(&fixed.channels, &moving.channels, RegistrationMode::Affine, &cfg.registration, Some(&rigid.transform)).unwrap();
    println!("affine: {:?} metric {:.4}", t0.elapsed(), affine.final_metric);

    let t0 = Instant::now();
    let syn = register_syn(&fixed.channels, &moving.channels, Some(&affine.transform), &cfg.registration).unwrap();
    println!("syn: {:?} metric {:.4} residual {:.3}", t0.elapsed(), syn.final_metric, syn.pair.round_trip_residual_vox());
}
