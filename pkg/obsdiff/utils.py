'''
Progress callbacks for `~obsdiff.package_scheduler.PackageScheduler`.

A callback is called as ``callback(package, layer_reports, index)`` after
every package; returning ``True`` stops the pipeline.
'''
from tqdm.autonotebook import tqdm


def _total_error(layer_reports):
    return sum(report['recon_error'] for report in layer_reports)


def callback_text(package, layer_reports, index):
    """Prints the pruned layers and their summed reconstruction error"""
    if layer_reports:
        layers = ', '.join(report['layer'] for report in layer_reports)
        print(f"Package {index}: pruned {layers} "
              f"(recon error: {_total_error(layer_reports):.4g})")
    else:
        print(f"Package {index}: nothing to prune")


def callback_none(package, layer_reports, index):
    """Non-verbose callback"""
    pass


class ProgressBar(object):
    """tqdm bar advancing by one per package, showing the running error"""
    def __init__(self, total=None, **kwds):
        self.t = tqdm(total=total, **kwds)
        self.error = 0.0

    def __call__(self, package, layer_reports, index):
        self.error += _total_error(layer_reports)
        self.t.set_postfix(recon_error=f'{self.error:.3g}', refresh=False)
        self.t.update(1)
        if self.t.total is not None and self.t.n >= self.t.total:
            self.t.close()


def callback_setup(set_type, n_packages):
    """
    Turn the ``callback`` argument of `PackageScheduler.run` into a callable.

    Parameters
    ----------
    set_type : str, callable or None
        ``'text'``, ``'progressbar'``, ``None`` (silent) or a function
        ``f(package, layer_reports, index)``.
    n_packages : int
        Length of the progress bar.
    """
    if set_type is None:
        return callback_none
    if isinstance(set_type, str):
        if set_type == 'text':
            return callback_text
        if set_type == 'progressbar':
            return ProgressBar(n_packages, unit='package')
    elif callable(set_type):
        return set_type
    raise TypeError("callback has to be 'text', 'progressbar', a callable "
                    "or None")
