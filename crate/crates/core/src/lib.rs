//! Ephemeral, immutable-infrastructure cluster lifecycle.
//!
//! One declarative manifest drives everything: trust material and machine
//! configs are generated, a resource graph is planned and applied against a
//! provider, a reconcile loop brings nodes to `Ready`, GitOps sync and the
//! access agent are bootstrapped, and `destroy` removes it all again.
//!
//! ```
//! use sskuba::manifest::parse_manifest;
//!
//! let m = parse_manifest(
//!     "apiVersion: sskuba/v1\n\
//!      kind: Cluster\n\
//!      metadata: { name: demo, domain: dev.example.org }\n\
//!      target:\n  provider: sim\n  region: local-1\n\
//!      \x20 controlPlane: { count: 3, machineType: m.small }\n\
//!      \x20 workers: { count: 2, machineType: m.large }\n\
//!      gitops: { repository: ./fleet, branch: main, path: clusters/demo }\n",
//! )
//! .unwrap();
//! assert_eq!(m.fqdn(), "demo.dev.example.org");
//! assert_eq!(m.spec_hash().len(), 64);
//! ```
//!
//! The simulator in [`provider`] is the complete backend; the cloud
//! providers are interface stubs.

pub mod access;
pub mod bundle;
pub mod canonical;
pub mod cli;
pub mod clock;
pub mod cluster;
pub mod fsutil;
pub mod gitops;
pub mod lifecycle;
pub mod machineconfig;
pub mod manifest;
pub mod node;
pub mod pki;
pub mod provider;
pub mod stack;

// The guide's code blocks are compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/manifest.md")]
    mod manifest {}
    #[doc = include_str!("../../../book/src/lifecycle.md")]
    mod lifecycle {}
    #[doc = include_str!("../../../book/src/trust.md")]
    mod trust {}
    #[doc = include_str!("../../../book/src/gitops.md")]
    mod gitops {}
    #[doc = include_str!("../../../book/src/bundles.md")]
    mod bundles {}
}
