// SPDX-License-Identifier: Apache-2.0
//! Deterministic reference model of the SPTM monitor, TXM, the Secure
//! Kernel, Exclave resources and Tightbeam IPC.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod core_model;
pub mod dispatcher;
pub mod exclave_resources;
pub mod frame_table;
pub mod page_mapper;
pub mod rules;
pub mod secure_kernel;
pub mod system;
pub mod tightbeam;
pub mod trace;
pub mod txm;
pub mod xnuproxy;
