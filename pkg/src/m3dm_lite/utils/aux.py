from m3dm_lite.errors import ConfigError

ABLATION_COLUMNS = ('name', 'fusion_mode', 'decision_mode', 'i_auroc', 'p_auroc', 'aupro')


def parse_pair(text, name='value'):
    """
    Parses `AxB` into a pair of positive integers.

    :param text: str; e.g. `56x56`, None passes through
    :param name: str; option name used in the error message
    :return: Tuple[int, int]
    """
    if text is None:
        return None
    try:
        first, second = (int(v) for v in text.lower().split('x'))
    except ValueError:
        raise ConfigError(f'`{name}` has to be given as AxB, e.g. 56x56, got `{text}`.')
    return first, second


def parse_names(text):
    """
    Comma separated names as a tuple, None passes through.

    :param text: str; e.g. `rgb,pt,fs`
    :return: Tuple[str]
    """
    if text is None:
        return None
    names = tuple(item.strip() for item in text.split(',') if item.strip())
    if len(names) == 0:
        raise ConfigError(f'Empty selection `{text}`.')
    return names


def format_table(rows, columns=ABLATION_COLUMNS):
    """
    Plain text table of dict rows, floats with 4 decimals.

    :param rows: List[dict];
    :param columns: Tuple[str];
    :return: str
    """
    cells = [[f'{row[c]:.4f}' if isinstance(row[c], float) else str(row[c]) for c in columns] for row in rows]
    widths = [max([len(c)] + [len(line[ii]) for line in cells]) for ii, c in enumerate(columns)]
    lines = ['  '.join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append('  '.join('-' * w for w in widths))
    lines.extend('  '.join(v.ljust(w) for v, w in zip(line, widths)) for line in cells)
    return '\n'.join(lines)
