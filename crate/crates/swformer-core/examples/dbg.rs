use swformer_core::wavelet::*;
use swformer_core::spike::*;
use swformer_core::neuron::*;
use swformer_core::tensor::{mse, DenseTensor};

fn main() {
    let side = 8usize;
    // Phase-shifted checkerboard: detail coefficients of both signs.
    let x = DenseTensor::from_fn(&[side, side], |i| {
        let (r, c) = (i / side, i % side);
        if ((r + 1) / 2 + (c + 1) / 2) % 2 == 0 { 0.8 } else { 0.2 }
    });
    let w = HaarMatrix::for_side(side).unwrap();
    for t_steps in [2usize, 4, 8, 16, 32] {
        let enc = rate_encode(&x, t_steps).unwrap();
        let mut line = format!("T={t_steps:2}");
        for v_th in [1.0, 0.5] {
            for polarity in [Polarity::Ternary, Polarity::Binary] {
                let spikes = SpikeTensor::from_values(enc.shape(), enc.values().to_vec(), polarity).unwrap();
                let cfg = match polarity {
                    Polarity::Ternary => NeuronConfig::ternary_if(v_th),
                    Polarity::Binary => NeuronConfig::binary_if(v_th),
                };
                let rt = haar2d_spiking_roundtrip(&spikes, &w, &cfg).unwrap();
                let dec = rt.decode();
                let p = psnr(&x, &dec, 1.0).unwrap();
                let e = mse(&x, &dec).unwrap();
                line.push_str(&format!("  [vth={v_th} {:?}] psnr {:5.2} mse {:.4}", polarity, p, e));
            }
        }
        println!("{line}");
    }
    // forward-only DC check
    let t_steps = 4;
    let xc = DenseTensor::filled(&[4, 4], 0.3);
    let enc = rate_encode(&xc, t_steps).unwrap();
    let tern = SpikeTensor::from_values(enc.shape(), enc.values().to_vec(), Polarity::Ternary).unwrap();
    let w4 = HaarMatrix::for_side(4).unwrap();
    let f = haar2d_spiking(&tern, &w4, &NeuronConfig::ternary_if(1.0), Direction::Forward).unwrap();
    let dec = f.decode();
    let exact = haar2d_forward_exact(&enc.time_mean(), &w4).unwrap();
    if let TransformCoeffs::Dense(t) = &exact.coeffs {
        println!("DC exact {:.3} decoded {:.3}", t.at(0,0), dec.at(0,0));
    }
}
