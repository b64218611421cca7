#ifndef CMONGE_CMONGE_HPP
#define CMONGE_CMONGE_HPP

/**
 * @file cmonge.hpp
 *
 * @brief Umbrella header for the conditional Monge gap library.
 */

#include "autoencoder.hpp"
#include "conditioning.hpp"
#include "data.hpp"
#include "error.hpp"
#include "io.hpp"
#include "metrics.hpp"
#include "monge_gap.hpp"
#include "nn.hpp"
#include "ot.hpp"
#include "trainer.hpp"
#include "types.hpp"

#endif
