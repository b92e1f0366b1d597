#ifndef FUNDSEG_FUNDSEG_HPP
#define FUNDSEG_FUNDSEG_HPP

#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "error.hpp"
#include "gradcheck.hpp"
#include "image.hpp"
#include "infer.hpp"
#include "layers.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "objective.hpp"
#include "tensor.hpp"
#include "text.hpp"
#include "train.hpp"

#endif
