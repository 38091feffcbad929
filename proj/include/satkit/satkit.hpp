#pragma once

#include "satkit/tensor.hpp"
#include "satkit/ops.hpp"
#include "satkit/params.hpp"
#include "satkit/optim.hpp"
#include "satkit/nnet.hpp"
#include "satkit/vocab.hpp"
#include "satkit/lattice.hpp"
#include "satkit/par.hpp"
#include "satkit/ngram.hpp"
#include "satkit/config.hpp"
#include "satkit/model.hpp"
#include "satkit/checkpoint.hpp"
#include "satkit/data.hpp"
#include "satkit/decoder.hpp"
#include "satkit/train.hpp"
