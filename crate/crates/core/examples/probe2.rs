use riqa_core::distort::{gaussian_blur, psnr};
use riqa_core::fixtures::reference_set;
use riqa_core::metrics::srocc;
use riqa_core::Tensor;

fn total_variation(img: &Tensor) -> f64 {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut acc = 0.0f64;
    for y in 0..h {
        for x in 1..w {
            acc += (img.at2(y, x) - img.at2(y, x - 1)).abs() as f64;
        }
    }
    for y in 1..h {
        for x in 0..w {
            acc += (img.at2(y, x) - img.at2(y - 1, x)).abs() as f64;
        }
    }
    acc / (h * w) as f64
}

fn main() {
    let refs = reference_set(8, 96, 96, 500);
    for grid in [vec![1.0f32, 2.0, 3.0, 4.0, 5.0], vec![0.5, 1.0, 2.0, 4.0, 8.0]] {
        println!("grid {grid:?}");
        let mut y = Vec::new();
        let mut feat = Vec::new();
        for (id, img) in &refs {
            let mut line = format!("  {id}: psnr");
            for (idx, sigma) in grid.iter().enumerate() {
                let out = gaussian_blur(img, *sigma).unwrap();
                let p = psnr(img, &out).unwrap();
                let tv = total_variation(&out);
                line.push_str(&format!(" {p:.1}"));
                y.push(-(idx as f64));
                feat.push(tv);
            }
            println!("{line}");
        }
        println!("  TV-feature SROCC vs quality rank: {:.4}", srocc(&y, &feat).unwrap());
        // adjacent-level PSNR spacing for the first reference
        let img = &refs[0].1;
        let mut last = f64::INFINITY;
        for sigma in &grid {
            let p = psnr(img, &gaussian_blur(img, *sigma).unwrap()).unwrap();
            println!("  sigma {sigma}: psnr {p:.2} (gap {:.2})", last - p);
            last = p;
        }
    }
}
