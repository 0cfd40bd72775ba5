//! Network architectures, complex/real packing, and loss functions.

pub mod loss;
pub mod net;
pub mod pack;

pub use loss::{loss_base, loss_base_batch, loss_sfs, loss_sfs_packed, loss_ssl, loss_ssl_batch};
pub use net::{
    build_baseline, build_sfs, build_ssl, Network, Sequential, SfsNet, SslNet, SFS_WIDTHS,
    SSL_CONV_WIDTHS, SSL_MLP_WIDTHS,
};
pub use pack::{
    cov_pack_backward, cov_pack_forward, pack_sfs_input, pack_ssl_input, unpack_sfs_output,
    CovCache, PackError,
};
