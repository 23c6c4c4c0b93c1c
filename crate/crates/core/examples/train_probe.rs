use rvit_core::data::{generate_shapes_dataset, CLASS_NAMES};

fn main() {
    let data = generate_shapes_dataset(20, 3).unwrap();
    for idx in 0..10 {
        let img = &data.images[idx];
        let label = data.labels[idx];
        println!("--- example {idx}: class {} ({}) ---", label, CLASS_NAMES[label]);
        // luminance, thresholded at midpoint between min and max
        let lum: Vec<f64> = (0..1024)
            .map(|p| (img.data()[p * 3] + img.data()[p * 3 + 1] + img.data()[p * 3 + 2]) / 3.0)
            .collect();
        let lo = lum.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = lum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mid = (lo + hi) / 2.0;
        for y in 0..32 {
            let row: String = (0..32)
                .map(|x| if lum[y * 32 + x] > mid { '#' } else { '.' })
                .collect();
            println!("{row}");
        }
    }
}
