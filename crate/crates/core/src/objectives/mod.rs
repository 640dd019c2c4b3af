//! Training objectives for the renderer: wireframe reconstruction, scene
//! generation, adversarial and histogram terms, and their weighted total.

mod losses;
mod msssim;
mod perceptual;

pub use losses::{
    adversarial_losses, d_adv_loss, g_adv_loss, gen_loss, hist_loss, l1_per_sample, rec_loss, total_loss, GanMode,
    GenLoss, LossReport, LossWeights, RecLoss,
};
pub use msssim::{ms_ssim, MsSsimConfig, MS_SSIM_WEIGHTS};
pub use perceptual::{perceptual_distance, FeatureExtractor, IdentityExtractor, Vgg16Features, VggConfig};
