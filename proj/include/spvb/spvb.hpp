#ifndef SPVB_SPVB_HPP
#define SPVB_SPVB_HPP

#include "spvb/config.hpp"
#include "spvb/conjugate.hpp"
#include "spvb/elbo.hpp"
#include "spvb/evaluation.hpp"
#include "spvb/init.hpp"
#include "spvb/linear_response.hpp"
#include "spvb/math_util.hpp"
#include "spvb/optimizer.hpp"
#include "spvb/parallel.hpp"
#include "spvb/prediction.hpp"
#include "spvb/report.hpp"
#include "spvb/rng.hpp"
#include "spvb/spatial.hpp"
#include "spvb/variational.hpp"
#include "spvb/vb_mfa.hpp"
#include "spvb/vb_nngp.hpp"

#endif
