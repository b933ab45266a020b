#pragma once

#include "lagvae/checkpoint.hpp"
#include "lagvae/config.hpp"
#include "lagvae/data.hpp"
#include "lagvae/errors.hpp"
#include "lagvae/eval.hpp"
#include "lagvae/experiment.hpp"
#include "lagvae/nn.hpp"
#include "lagvae/random.hpp"
#include "lagvae/tensor.hpp"
#include "lagvae/train.hpp"
#include "lagvae/vae.hpp"
