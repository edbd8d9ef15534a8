pub mod env;
pub mod paths;
pub mod rng;
pub mod topology;
pub mod policy;
pub mod es;
pub mod runtime;
pub mod config;
pub mod cli;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    pub mod intro {}
    #[doc = include_str!("../../../book/src/topology.md")]
    pub mod topology {}
    #[doc = include_str!("../../../book/src/environment.md")]
    pub mod environment {}
    #[doc = include_str!("../../../book/src/policy.md")]
    pub mod policy {}
    #[doc = include_str!("../../../book/src/es.md")]
    pub mod es {}
    #[doc = include_str!("../../../book/src/runtime.md")]
    pub mod runtime {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
