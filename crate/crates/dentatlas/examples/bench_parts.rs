use std::time::Instant;

use dentatlas::field::{compose_fields, exp_field, jacobian_determinant, min_interior_jacobian, warp_volume, Field3};
use dentatlas::geom::Geometry;
use dentatlas::register::local_cc_bidirectional;
use dentatlas::smooth::{smooth_field, smooth_grid};
use dentatlas::volgrid::Grid3;

fn main() {
    let geom = Geometry::new([97, 77, 94], [0.4; 3], [0.0; 3]).unwrap();
    let v: Grid3<f32> = Grid3::from_fn(geom.clone(), |p| {
        ((p[0] * 13 + p[1] * 7 + p[2] * 3) % 97) as f32 / 97.0
    });
    let smoothed = smooth_grid(&v, 1.0);
    let field = Field3::<f32>::from_fn(geom.clone(), |p| {
        [
            0.2 * ((p[1] as f32) * 0.2).sin(),
            0.15 * ((p[2] as f32) * 0.3).cos(),
            0.1,
        ]
    });

    let t = Instant::now();
    let warped = warp_volume(&smoothed, &field);
    println!("warp_volume: {:?}", t.elapsed());

    let t = Instant::now();
    let cc = local_cc_bidirectional(&smoothed, &warped, 4).unwrap();
    println!("local_cc_bidirectional r=4: {:?} (metric {:.3})", t.elapsed(), cc.metric);

    let t = Instant::now();
    let sm = smooth_field(&cc.gradient_b, 3.0);
    println!("smooth_field sigma=3: {:?}", t.elapsed());

    let t = Instant::now();
    let e = exp_field(&sm.scaled(0.001), 4).unwrap();
    println!("exp_field (4 squarings): {:?}", t.elapsed());

    let t = Instant::now();
    let comp = compose_fields(&field, &e).unwrap();
    println!("compose_fields: {:?}", t.elapsed());

    let t = Instant::now();
    let _ts = smooth_field(&comp, 0.5);
    println!("smooth_field sigma=0.5: {:?}", t.elapsed());

    let t = Instant::now();
    let _j = min_interior_jacobian(&comp);
    println!("min_interior_jacobian: {:?}", t.elapsed());

    let t = Instant::now();
    let _d = jacobian_determinant(&comp);
    println!("jacobian_determinant: {:?}", t.elapsed());
}
