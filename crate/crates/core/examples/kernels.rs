//! The numeric operators on small hand-picked inputs.

use drfuse::kernels::{
    jsd_from_logits, logit, logit_pool, margin_rank_attn_loss, masked_scaled_attention,
    orthogonality_penalty,
};
use drfuse::Matrix;

fn main() -> drfuse::Result<()> {
    let ehr = logit(&[0.8, 0.5, 0.1])?;
    let cxr = logit(&[0.4, 0.5, 0.3])?;
    println!("logit(p_ehr)       = {ehr:.4?}");
    println!("logit(p_cxr)       = {cxr:.4?}");
    println!("logit pool         = {:.4?}", logit_pool(&ehr, &cxr)?);
    println!("JSD                = {:.6}", jsd_from_logits(&ehr, &cxr)?);
    println!("JSD with itself    = {}", jsd_from_logits(&ehr, &ehr)?);
    println!(
        "orthogonality      = {:.4}",
        orthogonality_penalty(&[1.0, 0.0], &[1.0, 1.0])?
    );

    let probs = masked_scaled_attention(&[2.0, 1.0, 3.0], &[0.0, 0.0, f64::NEG_INFINITY], 4)?;
    println!("attention, image masked = {probs:.4?}");

    let alpha = Matrix::row_vector(vec![0.2, 0.3, 0.5]);
    let ordered = Matrix::row_vector(vec![0.3, 0.2, 0.1]);
    let reversed = Matrix::row_vector(vec![0.1, 0.2, 0.3]);
    println!(
        "ranking loss: consistent {:.3}, inverted {:.3}",
        margin_rank_attn_loss(&alpha, &ordered, 0.1)?,
        margin_rank_attn_loss(&alpha, &reversed, 0.1)?
    );
    Ok(())
}
